#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pbd/dnmap.hpp"
#include "pbd/forward.hpp"
#include "pbd/geometry.hpp"
#include "pbd/rellich.hpp"

namespace pbd {

using ojson = nlohmann::ordered_json;

/// Parameter lists of a study. Unlisted parameters take the base value.
struct SweepSpec {
    std::string kind = "reconstruct"; // reconstruct | rellich
    std::vector<double> M, h, eps, p;
};

struct ExperimentConfig {
    std::string domain = "unit_disk";
    std::string conductivity = "affine";
    std::string conductivity_b = "affine_minus"; // second model of the ab command
    std::string data = "exp";                    // exp | constant | oscillating
    double p = 3.0;
    double theta0 = 1.5 * M_PI; // x0 = boundary point at this angle
    double alpha_angle = 0.0;   // alpha = (cos, sin)
    std::vector<double> M{3.0, 4.0, 6.0, 8.0};
    double h = 0.05;
    MeshOptions mesh;
    std::vector<double> eps_schedule{1e-2, 1e-4, 1e-6, 1e-8};
    double residual_tol = 1e-10;
    int max_newton = 200;
    GammaBoundaryMode gamma_mode = GammaBoundaryMode::oracle;
    double points_per_period = 60.0;
    ProbeOptions probe;
    double reconstruction_floor_factor = 2.0;
    std::vector<double> probe_angles{0.0};
    double wolff_tol = 1e-12;
    std::string cutoff = CutoffSpec{}.id();
    int gamma_grid = 16;
    double gamma_grid_M = 8.0;
    std::optional<SweepSpec> sweep;
    std::string output_dir = "out";
    std::uint64_t seed = 7;
    int threads = 1;

    /// Throws UsageError.
    void validate() const;

    ojson to_json() const;
    /// Missing keys keep their defaults; unknown keys are a UsageError.
    static ExperimentConfig from_json(const ojson& j);
    static ExperimentConfig load(const std::string& path);

    Domain make_domain() const;
    Vec2 x0() const;
    Vec2 alpha() const;
    SolverConfig solver() const;
    MeasurementOptions measurement() const;
    ReconstructionOptions reconstruction() const;
    BoundaryDatum datum(const std::shared_ptr<const WolffProfile>& profile = nullptr) const;
};

struct StudyRow {
    std::size_t index = 0;
    std::string kind;
    double p = 0.0, M = 0.0, h = 0.0, eps = 0.0;
    bool ok = true;
    std::string error;
    double gamma_hat = 0.0, dgamma_hat = 0.0, err_gamma = 0.0, err_dgamma = 0.0;
    double rellich_lhs = 0.0, rellich_rhs = 0.0, rellich_residual = 0.0;
    std::size_t unconverged_probes = 0;
    double seconds = 0.0;
};

/// Cartesian product of the sweep lists in the order p, eps, h, M.
std::vector<StudyRow> study_tuples(const ExperimentConfig& config);

/// Columns kind,p,M,h,eps,status,gamma_hat,dgamma_hat,err_gamma,err_dgamma,
/// rellich_lhs,rellich_rhs,rellich_residual. Timings are left out so that
/// repeated runs produce identical files.
void write_study_csv(std::ostream& out, const std::vector<StudyRow>& rows);

/// Commands. Each writes its artifacts and manifest.json under
/// config.output_dir and returns the process exit code: 0 success,
/// 1 usage error, 2 numerical failure (artifacts written).
int cmd_wolff(const ExperimentConfig& config, std::ostream& console);
int cmd_forward(const ExperimentConfig& config, std::ostream& console);
int cmd_dnmap_probe(const ExperimentConfig& config, std::ostream& console);
int cmd_reconstruct(const ExperimentConfig& config, std::ostream& console);
int cmd_study(const ExperimentConfig& config, std::ostream& console);
int cmd_ab(const ExperimentConfig& config, std::ostream& console);

} // namespace pbd
