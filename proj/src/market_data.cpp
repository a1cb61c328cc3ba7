#include "volcal/market_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <boost/math/tools/toms748_solve.hpp>

namespace volcal {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(trim(field));
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

int find_column(const std::vector<std::string>& header, const std::string& name) {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return static_cast<int>(i);
  return -1;
}

double parse_number(const std::string& field, int row) {
  try {
    std::size_t used = 0;
    double x = std::stod(field, &used);
    if (used != field.size()) throw std::invalid_argument("trailing junk");
    return x;
  } catch (const std::exception&) {
    std::ostringstream msg;
    msg << "row " << row << ": cannot parse '" << field << "' as a number";
    throw MalformedRowError(msg.str());
  }
}

double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

}  // namespace

void MarketParams::validate() const {
  std::ostringstream msg;
  if (spot <= 0.0) {
    msg << "spot must be positive, got " << spot;
    throw ConfigError(msg.str());
  }
  if (t_max <= 0.0) {
    msg << "t_max must be positive, got " << t_max;
    throw ConfigError(msg.str());
  }
  if (!(k_min < spot && spot < k_max)) {
    msg << "need k_min < spot < k_max, got [" << k_min << ", " << k_max << "] around " << spot;
    throw ConfigError(msg.str());
  }
  if (k_min < 0.0) {
    msg << "k_min must be nonnegative, got " << k_min;
    throw ConfigError(msg.str());
  }
}

QuoteLoadResult load_quotes(const std::string& path, const QuoteSchema& schema) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open quote file: " + path);
  return load_quotes(in, schema);
}

QuoteLoadResult load_quotes(std::istream& in, const QuoteSchema& schema) {
  std::string line;
  if (!std::getline(in, line)) throw MissingColumnError("quote file has no header line");
  std::vector<std::string> header = split_csv(line);
  for (std::string& h : header) h = lower(h);

  const int col_t = find_column(header, "maturity");
  const int col_k = find_column(header, "strike");
  if (col_t < 0) throw MissingColumnError("required column 'maturity' not found");
  if (col_k < 0) throw MissingColumnError("required column 'strike' not found");

  const int col_mid = find_column(header, "mid");
  const int col_bid = find_column(header, "bid");
  const int col_ask = find_column(header, "ask");
  const int col_iv = find_column(header, "implied_vol");
  const int col_role = find_column(header, "role");

  PriceColumns mode = schema.columns;
  if (mode == PriceColumns::auto_detect) {
    if (col_mid >= 0)
      mode = PriceColumns::mid;
    else if (col_bid >= 0 && col_ask >= 0)
      mode = PriceColumns::bid_ask;
    else if (col_iv >= 0)
      mode = PriceColumns::implied_vol;
    else
      throw MissingColumnError("no price columns: need 'mid', 'bid'+'ask' or 'implied_vol'");
  }
  if (mode == PriceColumns::mid && col_mid < 0) throw MissingColumnError("column 'mid' not found");
  if (mode == PriceColumns::bid_ask && (col_bid < 0 || col_ask < 0))
    throw MissingColumnError("columns 'bid' and 'ask' not found");
  if (mode == PriceColumns::implied_vol && col_iv < 0)
    throw MissingColumnError("column 'implied_vol' not found");
  if (mode == PriceColumns::implied_vol && schema.spot <= 0.0)
    throw ConfigError("implied_vol quotes need schema.spot/rate/dividend to convert to prices");

  QuoteLoadResult result;
  result.has_roles = col_role >= 0;

  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    std::vector<std::string> fields = split_csv(line);
    if (fields.size() != header.size()) {
      std::ostringstream msg;
      msg << "row " << row << ": expected " << header.size() << " fields, got " << fields.size();
      throw MalformedRowError(msg.str());
    }

    OptionQuote q;
    q.maturity = parse_number(fields[col_t], row);
    q.strike = parse_number(fields[col_k], row);
    if (q.strike <= 0.0) {
      std::ostringstream msg;
      msg << "row " << row << ": strike " << q.strike << " is not positive";
      throw NonPositiveStrikeError(msg.str());
    }
    if (q.maturity <= 0.0) {
      std::ostringstream msg;
      msg << "row " << row << ": maturity " << q.maturity << " is not positive";
      throw MalformedRowError(msg.str());
    }

    switch (mode) {
      case PriceColumns::mid:
        q.mid = parse_number(fields[col_mid], row);
        break;
      case PriceColumns::bid_ask: {
        double bid = parse_number(fields[col_bid], row);
        double ask = parse_number(fields[col_ask], row);
        q.mid = 0.5 * (bid + ask);
        break;
      }
      case PriceColumns::implied_vol: {
        double vol = parse_number(fields[col_iv], row);
        if (vol <= 0.0) {
          std::ostringstream msg;
          msg << "row " << row << ": dropped, implied vol " << vol << " not positive";
          result.warnings.push_back(msg.str());
          continue;
        }
        q.mid = bs_call_price(schema.spot, q.strike, q.maturity, schema.rate, schema.dividend, vol);
        break;
      }
      case PriceColumns::auto_detect:
        break;  // resolved above
    }

    if (q.mid < 0.0) {
      std::ostringstream msg;
      msg << "row " << row << ": dropped, negative mid " << q.mid;
      result.warnings.push_back(msg.str());
      continue;
    }
    if (schema.spot > 0.0 && q.mid > schema.spot) {
      std::ostringstream msg;
      msg << "row " << row << ": dropped, mid " << q.mid << " above spot " << schema.spot;
      result.warnings.push_back(msg.str());
      continue;
    }

    if (col_role >= 0) {
      std::string role = lower(fields[col_role]);
      if (role == "train")
        q.role = QuoteRole::train;
      else if (role == "validate")
        q.role = QuoteRole::validate;
      else {
        std::ostringstream msg;
        msg << "row " << row << ": role must be train|validate, got '" << fields[col_role] << "'";
        throw MalformedRowError(msg.str());
      }
    }
    result.quotes.push_back(q);
  }

  std::sort(result.quotes.begin(), result.quotes.end(), [](const OptionQuote& x, const OptionQuote& y) {
    if (x.maturity != y.maturity) return x.maturity < y.maturity;
    return x.strike < y.strike;
  });
  for (std::size_t i = 1; i < result.quotes.size(); ++i) {
    const OptionQuote& a = result.quotes[i - 1];
    const OptionQuote& b = result.quotes[i];
    if (a.maturity == b.maturity && a.strike == b.strike) {
      std::ostringstream msg;
      msg << "duplicate quote at maturity " << a.maturity << ", strike " << a.strike;
      throw DuplicateQuoteError(msg.str());
    }
    // Static-arbitrage sanity: call mids should not increase with strike
    // within one maturity. Soft check only; real data can violate it.
    if (a.maturity == b.maturity && b.mid > a.mid + 1e-9) {
      std::ostringstream msg;
      msg << "mids not monotone in strike at maturity " << a.maturity << " (K=" << a.strike
          << " -> " << b.strike << ")";
      result.warnings.push_back(msg.str());
    }
  }
  return result;
}

double bs_call_price(double spot, double strike, double maturity, double rate, double dividend,
                     double vol) {
  const double df_r = std::exp(-rate * maturity);
  const double df_q = std::exp(-dividend * maturity);
  if (maturity <= 0.0 || vol <= 0.0)
    return std::max(spot * df_q - strike * df_r, 0.0);
  const double sd = vol * std::sqrt(maturity);
  const double d1 = (std::log(spot / strike) + (rate - dividend + 0.5 * vol * vol) * maturity) / sd;
  const double d2 = d1 - sd;
  return spot * df_q * norm_cdf(d1) - strike * df_r * norm_cdf(d2);
}

double bs_implied_vol(double price, double spot, double strike, double maturity, double rate,
                      double dividend) {
  if (maturity <= 0.0 || spot <= 0.0 || strike <= 0.0) return -1.0;
  const double lo_bound = std::max(spot * std::exp(-dividend * maturity) -
                                       strike * std::exp(-rate * maturity),
                                   0.0);
  const double hi_bound = spot * std::exp(-dividend * maturity);
  if (price <= lo_bound || price >= hi_bound) return -1.0;

  auto objective = [&](double vol) {
    return bs_call_price(spot, strike, maturity, rate, dividend, vol) - price;
  };
  double lo = 1e-9, hi = 1.0;
  while (objective(hi) < 0.0 && hi < 20.0) hi *= 2.0;
  if (objective(hi) < 0.0) return -1.0;
  boost::math::tools::eps_tolerance<double> tol(48);
  std::uintmax_t max_iter = 200;
  auto bracket = boost::math::tools::toms748_solve(objective, lo, hi, tol, max_iter);
  return 0.5 * (bracket.first + bracket.second);
}

std::pair<DomainMap, std::vector<OptionQuote>> rescale_domain(const std::vector<OptionQuote>& quotes,
                                                              const MarketParams& params) {
  if (params.k_max <= params.k_min || params.t_max <= 0.0) {
    std::ostringstream msg;
    msg << "degenerate domain: K in [" << params.k_min << ", " << params.k_max << "], T_max "
        << params.t_max;
    throw DegenerateRangeError(msg.str());
  }
  DomainMap map;
  map.t_max = params.t_max;
  map.k_min = params.k_min;
  map.k_max = params.k_max;

  std::vector<OptionQuote> rescaled = quotes;
  for (OptionQuote& q : rescaled) {
    q.maturity = map.u_of_t(q.maturity);
    q.strike = map.v_of_k(q.strike);
  }
  return {map, std::move(rescaled)};
}

std::pair<std::vector<OptionQuote>, std::vector<OptionQuote>> split_train_validate(
    const std::vector<OptionQuote>& quotes, const SplitRule& rule) {
  std::vector<OptionQuote> train, validate;
  for (OptionQuote q : quotes) {
    bool is_train;
    if (rule.kind == SplitRule::Kind::maturity_cutoff)
      is_train = q.maturity <= rule.cutoff + 1e-12;
    else
      is_train = q.role == QuoteRole::train;
    q.role = is_train ? QuoteRole::train : QuoteRole::validate;
    (is_train ? train : validate).push_back(q);
  }
  if (train.empty()) throw EmptyTrainingSetError("split rule left the training set empty");
  return {std::move(train), std::move(validate)};
}

}  // namespace volcal
