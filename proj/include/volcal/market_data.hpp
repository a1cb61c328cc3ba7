#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "volcal/errors.hpp"

namespace volcal {

enum class QuoteRole { train, validate };

// A single European call quote. Prices are mids in currency units.
struct OptionQuote {
  double maturity = 0.0;  // years
  double strike = 0.0;    // currency
  double mid = 0.0;       // currency
  QuoteRole role = QuoteRole::train;
};

// Market environment and the strike/maturity box the PDE is solved on.
// k_min/k_max bound the solver domain; quotes must lie inside it but the
// domain is normally padded well beyond the quoted strikes so that the
// Dirichlet boundaries do not contaminate prices in the quoted region.
struct MarketParams {
  double spot = 0.0;
  double rate = 0.0;
  double dividend = 0.0;
  double t_max = 0.0;
  double k_min = 0.0;
  double k_max = 0.0;

  void validate() const;  // throws ConfigError on violated invariants
};

// Affine map between (T, K) and unit-square coordinates (u, v) in
// [-0.5, 0.5]^2. Time anchor: u(0) = -0.5, u(t_max) = +0.5.
struct DomainMap {
  double t_max = 1.0;
  double k_min = 0.0;
  double k_max = 1.0;

  double u_of_t(double t) const { return t / t_max - 0.5; }
  double t_of_u(double u) const { return (u + 0.5) * t_max; }
  double v_of_k(double k) const { return (k - k_min) / (k_max - k_min) - 0.5; }
  double k_of_v(double v) const { return k_min + (v + 0.5) * (k_max - k_min); }
};

// How the quote CSV encodes prices. auto_detect picks the first matching
// variant from the header: mid, bid/ask, or implied_vol.
enum class PriceColumns { auto_detect, mid, bid_ask, implied_vol };

struct QuoteSchema {
  PriceColumns columns = PriceColumns::auto_detect;
  // Needed to convert implied vols to prices; ignored for mid/bid_ask.
  double spot = 0.0;
  double rate = 0.0;
  double dividend = 0.0;
};

struct QuoteLoadResult {
  std::vector<OptionQuote> quotes;  // sorted by (maturity, strike)
  bool has_roles = false;           // true when the file carried a role column
  std::vector<std::string> warnings;
};

// Loads quotes from a CSV file with a header line. Required columns:
// maturity, strike, plus a price encoding per QuoteSchema. Optional column
// role with values train|validate. Rows failing sanity checks (negative mid,
// mid above spot) are dropped with a warning; structural problems throw.
QuoteLoadResult load_quotes(const std::string& path, const QuoteSchema& schema);
QuoteLoadResult load_quotes(std::istream& in, const QuoteSchema& schema);

// Black-Scholes European call with continuous dividend yield.
double bs_call_price(double spot, double strike, double maturity, double rate,
                     double dividend, double vol);

// Inverts bs_call_price in vol. Returns a negative value when the price is
// outside the attainable range instead of throwing.
double bs_implied_vol(double price, double spot, double strike, double maturity,
                      double rate, double dividend);

// Builds the unit-square map for params and returns the quotes with
// (maturity, strike) replaced by the rescaled (u, v) coordinates.
std::pair<DomainMap, std::vector<OptionQuote>> rescale_domain(
    const std::vector<OptionQuote>& quotes, const MarketParams& params);

struct SplitRule {
  enum class Kind { maturity_cutoff, labels } kind = Kind::maturity_cutoff;
  double cutoff = 0.0;  // maturities strictly above go to validation
};

// Splits quotes into (train, validate). Throws EmptyTrainingSetError when the
// rule leaves the training side empty.
std::pair<std::vector<OptionQuote>, std::vector<OptionQuote>> split_train_validate(
    const std::vector<OptionQuote>& quotes, const SplitRule& rule);

}  // namespace volcal
