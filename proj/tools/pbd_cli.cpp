#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "pbd/errors.hpp"
#include "pbd/harness.hpp"

namespace {

struct CommonFlags {
    std::string config;
    std::optional<std::string> out;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    std::optional<double> p;
    std::optional<double> tol;
};

void add_common(CLI::App* sub, CommonFlags& f) {
    sub->add_option("--config", f.config, "experiment configuration (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--out", f.out, "output directory");
    sub->add_option("--seed", f.seed, "random seed");
    sub->add_option("--threads", f.threads, "worker threads")->check(CLI::PositiveNumber);
}

pbd::ExperimentConfig resolve(const CommonFlags& f) {
    pbd::ExperimentConfig c = f.config.empty() ? pbd::ExperimentConfig{} : pbd::ExperimentConfig::load(f.config);
    if (f.out) c.output_dir = *f.out;
    if (f.seed) c.seed = *f.seed;
    if (f.threads) c.threads = *f.threads;
    if (f.p) c.p = *f.p;
    if (f.tol) c.wolff_tol = *f.tol;
    return c;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"p-Laplace boundary determination laboratory"};
    app.require_subcommand(1);
    CommonFlags flags;

    auto* wolff = app.add_subcommand("wolff", "Wolff profile, lambda, K and c_p");
    add_common(wolff, flags);
    wolff->add_option("--p", flags.p, "exponent p > 1");
    wolff->add_option("--tol", flags.tol, "integration tolerance");

    auto* forward = app.add_subcommand("forward", "one forward solve");
    add_common(forward, flags);
    auto* probe = app.add_subcommand("dnmap-probe", "strong DN values by mollifier probes");
    add_common(probe, flags);
    auto* reconstruct = app.add_subcommand("reconstruct", "recover gamma(x0) and d_alpha gamma(x0)");
    add_common(reconstruct, flags);
    auto* study = app.add_subcommand("study", "parameter sweep");
    add_common(study, flags);
    auto* ab = app.add_subcommand("ab", "reconstruct against two hidden conductivities");
    add_common(ab, flags);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    pbd::ExperimentConfig config;
    try {
        config = resolve(flags);
    } catch (const pbd::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }

    if (wolff->parsed()) return pbd::cmd_wolff(config, std::cout);
    if (forward->parsed()) return pbd::cmd_forward(config, std::cout);
    if (probe->parsed()) return pbd::cmd_dnmap_probe(config, std::cout);
    if (reconstruct->parsed()) return pbd::cmd_reconstruct(config, std::cout);
    if (study->parsed()) return pbd::cmd_study(config, std::cout);
    return pbd::cmd_ab(config, std::cout);
}
