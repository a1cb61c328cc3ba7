#pragma once

#include <stdexcept>
#include <string>

namespace volcal {

// Base class for all library errors so callers can catch volcal failures
// separately from generic std exceptions.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// ---- market data ----
class MissingColumnError : public Error { public: using Error::Error; };
class NonPositiveStrikeError : public Error { public: using Error::Error; };
class DuplicateQuoteError : public Error { public: using Error::Error; };
class MalformedRowError : public Error { public: using Error::Error; };
class DegenerateRangeError : public Error { public: using Error::Error; };
class EmptyTrainingSetError : public Error { public: using Error::Error; };

// ---- prior basis ----
class OrderTooLargeError : public Error { public: using Error::Error; };
class IndexOutOfRangeError : public Error { public: using Error::Error; };
class DimensionMismatchError : public Error { public: using Error::Error; };
class ThresholdUnreachableError : public Error { public: using Error::Error; };

// ---- pricer ----
class TooFewNodesError : public Error { public: using Error::Error; };
class NonPositiveVolatilityError : public Error { public: using Error::Error; };
class SingularSystemError : public Error { public: using Error::Error; };
class MaturityNotOnGridError : public Error { public: using Error::Error; };
class StrikeOutOfDomainError : public Error { public: using Error::Error; };

// ---- posterior ----
class LengthMismatchError : public Error { public: using Error::Error; };

// ---- sampler ----
class CovarianceFactorizationError : public Error { public: using Error::Error; };

// ---- orchestration ----
class ConfigError : public Error { public: using Error::Error; };
class UnknownCaseError : public Error { public: using Error::Error; };
class EmptyChainError : public Error { public: using Error::Error; };
class CheckpointError : public Error { public: using Error::Error; };

}  // namespace volcal
