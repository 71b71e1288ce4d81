#pragma once

#include <stdexcept>
#include <string>

namespace flowcast {

// Base class for everything this library throws on purpose.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad configuration files or CLI arguments.  The CLI exits 2.
struct ConfigError : Error {
    using Error::Error;
};

// Bad input data (CSV contents, aggregation maps, zone layout).
// Validation failures, so the CLI also exits 2.
struct DataError : Error {
    using Error::Error;
};

// Numerical failure while fitting or raking.  The CLI exits 3.
struct NumericError : Error {
    using Error::Error;
};

// data / validation ---------------------------------------------------------

struct MissingColumn : DataError { using DataError::DataError; };
struct NegativeCount : DataError { using DataError::DataError; };
struct InvalidCount : DataError { using DataError::DataError; };
struct DuplicateStation : DataError { using DataError::DataError; };
struct UnmappedLabel : DataError { using DataError::DataError; };
struct ZeroElectorate : DataError { using DataError::DataError; };
struct OptionMismatch : DataError { using DataError::DataError; };
struct MinStations : DataError { using DataError::DataError; };
struct UnknownZone : DataError { using DataError::DataError; };
struct UnknownCell : DataError { using DataError::DataError; };
struct MissingAnchor : DataError { using DataError::DataError; };
struct MissingAbstention : DataError { using DataError::DataError; };
struct ZeroRowTotal : DataError { using DataError::DataError; };
struct ZeroDenominator : DataError { using DataError::DataError; };
struct ZeroVariance : DataError { using DataError::DataError; };
struct PerfectCollinearity : DataError { using DataError::DataError; };
struct RankDeficientDesign : DataError { using DataError::DataError; };
struct DegenerateOption : DataError { using DataError::DataError; };
struct DimensionMismatch : DataError { using DataError::DataError; };
struct InvalidSpec : DataError { using DataError::DataError; };

// numerics ------------------------------------------------------------------

struct NotConverged : NumericError { using NumericError::NumericError; };
struct NoConvergence : NumericError { using NumericError::NumericError; };
struct SingularInformation : NumericError { using NumericError::NumericError; };
struct InfeasibleMargins : NumericError { using NumericError::NumericError; };
struct NonPSDCovariance : NumericError { using NumericError::NumericError; };
struct Separation : NumericError { using NumericError::NumericError; };

} // namespace flowcast
