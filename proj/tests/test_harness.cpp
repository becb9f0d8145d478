#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "pbd/errors.hpp"
#include "pbd/harness.hpp"

using namespace pbd;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("pbd_harness_" + name);
    fs::remove_all(dir);
    return dir;
}

ojson load_json(const fs::path& file) {
    std::ifstream in(file);
    EXPECT_TRUE(in.good()) << file;
    return ojson::parse(in);
}

std::string slurp(const fs::path& file) {
    std::ifstream in(file);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

ExperimentConfig base(const std::string& name) {
    ExperimentConfig c;
    c.output_dir = scratch(name).string();
    return c;
}

} // namespace

TEST(Config, RoundTripsLosslessly) {
    ExperimentConfig c;
    c.p = 2.5;
    c.theta0 = 0.1 + 1e-13;
    c.alpha_angle = 1.0 / 3.0;
    c.M = {2.0, 5.0};
    c.probe.abs_floor = 0.125;
    c.gamma_mode = GammaBoundaryMode::recovered;
    c.sweep = SweepSpec{"rellich", {}, {0.02, 0.01}, {}, {2.0, 3.0}};
    c.seed = 1234567890123ull;
    const ojson j = c.to_json();
    const ExperimentConfig back = ExperimentConfig::from_json(j);
    EXPECT_EQ(back.to_json(), j);
    EXPECT_EQ(back.to_json().dump(), j.dump());
    EXPECT_EQ(back.theta0, c.theta0);
    EXPECT_EQ(back.alpha_angle, c.alpha_angle);
    EXPECT_EQ(back.seed, c.seed);
}

TEST(Config, Validation) {
    EXPECT_THROW(ExperimentConfig::from_json(ojson{{"conductivity", "nope"}}), UsageError);
    EXPECT_THROW(ExperimentConfig::from_json(ojson{{"theta0", 2.0 * M_PI}}), UsageError);
    EXPECT_THROW(ExperimentConfig::from_json(ojson{{"typo_key", 1}}), UsageError);
    EXPECT_THROW(ExperimentConfig::from_json(ojson{{"p", "three"}}), UsageError);
    EXPECT_THROW(ExperimentConfig::from_json(ojson{{"M", {4.0, 3.0}}}), UsageError);
    EXPECT_THROW(ExperimentConfig::from_json(ojson{{"sweep", {{"M", ojson::array()}}}}), UsageError);
    EXPECT_THROW(ExperimentConfig::load("/nonexistent/config.json"), UsageError);
    const ExperimentConfig d = ExperimentConfig::from_json(ojson::object());
    EXPECT_EQ(d.to_json(), ExperimentConfig{}.to_json());
    EXPECT_NEAR(d.x0().y(), -1.0, 1e-12);
}

TEST(Cli, Wolff) {
    ExperimentConfig c = base("wolff2");
    c.p = 2.0;
    std::ostringstream console;
    ASSERT_EQ(cmd_wolff(c, console), 0);
    const ojson j = load_json(fs::path(c.output_dir) / "wolff.json");
    EXPECT_NEAR(j["lambda"].get<double>(), 2.0 * M_PI, 1e-6);
    EXPECT_NEAR(j["K"].get<double>(), 1.0, 1e-6);
    EXPECT_TRUE(fs::exists(fs::path(c.output_dir) / "profile.csv"));
    const ojson m = load_json(fs::path(c.output_dir) / "manifest.json");
    EXPECT_EQ(m["command"], "wolff");
    EXPECT_EQ(m["exit_code"], 0);
    EXPECT_EQ(m["config"], c.to_json());
    EXPECT_TRUE(m["versions"].contains("eigen"));

    c.p = 4.0;
    double lambdas[2];
    int k = 0;
    for (double tol : {1e-9, 1e-12}) {
        c.wolff_tol = tol;
        ASSERT_EQ(cmd_wolff(c, console), 0);
        lambdas[k++] = load_json(fs::path(c.output_dir) / "wolff.json")["lambda"].get<double>();
    }
    EXPECT_NEAR(lambdas[0], lambdas[1], 1e-6);

    c.p = 1.0;
    EXPECT_EQ(cmd_wolff(c, console), 1);
    EXPECT_EQ(load_json(fs::path(c.output_dir) / "manifest.json")["exit_code"], 1);
}

TEST(Cli, ForwardManufacturedAndLinearMatch) {
    ExperimentConfig c = base("forward");
    c.conductivity = "manufactured";
    c.h = 0.02;
    std::ostringstream console;
    ASSERT_EQ(cmd_forward(c, console), 0);
    const fs::path dir(c.output_dir);
    EXPECT_LE(load_json(dir / "forward.json")["relative_l2_error"].get<double>(), 0.01);
    for (const char* f : {"mesh.txt", "solution.csv", "convergence.json", "manifest.json"}) EXPECT_TRUE(fs::exists(dir / f));
    std::ifstream mesh_in(dir / "mesh.txt");
    EXPECT_GT(Mesh::read(mesh_in).num_triangles(), 1000u);

    c.p = 2.0;
    c.h = 0.05;
    ASSERT_EQ(cmd_forward(c, console), 0);
    EXPECT_LE(load_json(dir / "forward.json")["linear_max_difference"].get<double>(), 1e-8);

    c.data = "constant";
    c.p = 3.0;
    ASSERT_EQ(cmd_forward(c, console), 0);
    EXPECT_LE(std::abs(load_json(dir / "forward.json")["energy_eps0"].get<double>()), 1e-12);
}

TEST(Cli, ForwardNonConvergenceWritesReport) {
    ExperimentConfig c = base("forward_fail");
    c.max_newton = 1;
    c.h = 0.05;
    std::ostringstream console;
    EXPECT_EQ(cmd_forward(c, console), 2);
    const fs::path dir(c.output_dir);
    EXPECT_TRUE(fs::exists(dir / "convergence.json"));
    EXPECT_TRUE(fs::exists(dir / "solution.csv"));
    EXPECT_FALSE(load_json(dir / "forward.json")["converged"].get<bool>());
    EXPECT_EQ(load_json(dir / "manifest.json")["exit_code"], 2);
}

TEST(Cli, DnmapProbe) {
    ExperimentConfig c = base("probe");
    c.conductivity = "manufactured";
    c.h = 0.02;
    c.probe_angles = {0.0, 2.0};
    std::ostringstream console;
    ASSERT_EQ(cmd_dnmap_probe(c, console), 0);
    const ojson j = load_json(fs::path(c.output_dir) / "probe.json");
    EXPECT_NEAR(j["probes"][0]["value"].get<double>(), -1.0, 0.02);
    EXPECT_NEAR(j["probes"][1]["value"].get<double>(), -std::cos(2.0), 0.02);
    EXPECT_EQ(slurp(fs::path(c.output_dir) / "probes.csv").rfind("x0_index,delta,", 0), 0u);

    c.h = 0.05; // probes cannot be resolved
    EXPECT_EQ(cmd_dnmap_probe(c, console), 2);
}

TEST(Cli, StudyEmptySweepIsUsageError) {
    ExperimentConfig c = base("study_empty");
    std::ostringstream console;
    EXPECT_EQ(cmd_study(c, console), 1);
    c.sweep = SweepSpec{};
    EXPECT_EQ(cmd_study(c, console), 1);
}

TEST(Cli, StudyRellichRefinementAndDeterminism) {
    ExperimentConfig c = base("study_rellich");
    c.conductivity = "manufactured";
    c.sweep = SweepSpec{"rellich", {}, {0.02, 0.01}, {}, {}};
    std::ostringstream console;
    ASSERT_EQ(cmd_study(c, console), 0);
    const ojson j = load_json(fs::path(c.output_dir) / "study.json");
    ASSERT_EQ(j["rows"].size(), 2u);
    ASSERT_EQ(j["summary"]["residual_ratios"].size(), 1u);
    const double ratio = j["summary"]["residual_ratios"][0]["ratio"].get<double>();
    EXPECT_GE(ratio, 1.5);
    EXPECT_LE(ratio, 5.0);
    const std::string first = slurp(fs::path(c.output_dir) / "study.csv");

    c.sweep->h = {0.02};
    c.sweep->p = {2.0, 3.0};
    c.threads = 1;
    ASSERT_EQ(cmd_study(c, console), 0);
    const std::string serial = slurp(fs::path(c.output_dir) / "study.csv");
    c.threads = 2;
    ASSERT_EQ(cmd_study(c, console), 0);
    EXPECT_EQ(slurp(fs::path(c.output_dir) / "study.csv"), serial);
    EXPECT_NE(first, serial);
}

TEST(Cli, StudyReconstructTrend) {
    ExperimentConfig c = base("study_reconstruct");
    c.points_per_period = 40.0;
    c.sweep = SweepSpec{"reconstruct", {3.0, 4.0, 6.0, 8.0}, {}, {}, {}};
    std::ostringstream console;
    ASSERT_EQ(cmd_study(c, console), 0);
    const ojson rows = load_json(fs::path(c.output_dir) / "study.json")["rows"];
    ASSERT_EQ(rows.size(), 4u);
    for (const auto& r : rows) ASSERT_TRUE(r["ok"].get<bool>());
    EXPECT_LT(rows[3]["err_gamma"].get<double>(), rows[0]["err_gamma"].get<double>());
    EXPECT_LT(rows[3]["err_dgamma"].get<double>(), rows[0]["err_dgamma"].get<double>());
    EXPECT_LE(std::abs(rows[3]["dgamma_hat"].get<double>() - 0.3), 0.06);
}

TEST(Cli, ReconstructConstant) {
    ExperimentConfig c = base("reconstruct");
    c.conductivity = "constant";
    c.points_per_period = 40.0;
    c.M = {8.0};
    std::ostringstream console;
    ASSERT_EQ(cmd_reconstruct(c, console), 0);
    const fs::path dir(c.output_dir);
    const ojson j = load_json(dir / "reconstruction.json");
    EXPECT_LE(std::abs(j["final"]["dgamma_hat"].get<double>()), 0.1);
    EXPECT_EQ(slurp(dir / "reconstruction.csv").rfind("M,N,gamma_hat,dgamma_hat,err_gamma,err_dgamma\n8,64,", 0), 0u);
    EXPECT_NE(console.str().find("truth: gamma(x0) = 1"), std::string::npos);
}

TEST(Cli, AbMirroredAndIdentical) {
    ExperimentConfig c = base("ab");
    c.points_per_period = 40.0;
    c.M = {3.0};
    c.conductivity = "affine_plus";
    c.conductivity_b = "affine_minus";
    std::ostringstream console;
    ASSERT_EQ(cmd_ab(c, console), 0);
    const ojson ab = load_json(fs::path(c.output_dir) / "ab.json");
    std::swap(c.conductivity, c.conductivity_b);
    ASSERT_EQ(cmd_ab(c, console), 0);
    const ojson ba = load_json(fs::path(c.output_dir) / "ab.json");
    EXPECT_EQ(ab["models"][0]["final_dgamma"], ba["models"][1]["final_dgamma"]);
    EXPECT_EQ(ab["models"][1]["final_dgamma"], ba["models"][0]["final_dgamma"]);
    EXPECT_EQ(ab["separation_dgamma"], ba["separation_dgamma"]);
    EXPECT_TRUE(ab["precondition"]["equal_gamma_at_x0"].get<bool>());

    c.conductivity_b = c.conductivity;
    ASSERT_EQ(cmd_ab(c, console), 0);
    EXPECT_EQ(load_json(fs::path(c.output_dir) / "ab.json")["separation_dgamma"].get<double>(), 0.0);
}
