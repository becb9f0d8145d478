#pragma once

#include <stdexcept>
#include <string>

namespace pbd {

// Base of every error raised by the library. The CLI maps UsageError to exit
// code 1 and every other pbd::Error to exit code 2.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define PBD_DEFINE_ERROR(Name)                                                 \
    class Name : public Error {                                                \
    public:                                                                    \
        explicit Name(const std::string& what) : Error(#Name ": " + what) {}   \
    }

PBD_DEFINE_ERROR(UsageError);

// geometry
PBD_DEFINE_ERROR(NotOnBoundary);
PBD_DEFINE_ERROR(DegenerateNormal);
PBD_DEFINE_ERROR(MeshBudgetExceeded);
PBD_DEFINE_ERROR(MeshFormatError);

// wolff
PBD_DEFINE_ERROR(DegeneratePhasePoint);
PBD_DEFINE_ERROR(PeriodNotFound);
PBD_DEFINE_ERROR(ToleranceNotMet);
PBD_DEFINE_ERROR(DegenerateGradient);

// forward
PBD_DEFINE_ERROR(MeshTooCoarse);
PBD_DEFINE_ERROR(SingularSystem);
PBD_DEFINE_ERROR(PointOutsideMesh);

// dnmap
PBD_DEFINE_ERROR(ProbeUnresolved);
PBD_DEFINE_ERROR(NonConvergentProbe);

// rellich
PBD_DEFINE_ERROR(SamplingMismatch);

#undef PBD_DEFINE_ERROR

} // namespace pbd
