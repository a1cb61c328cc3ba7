#include "doctest.h"

#include <cmath>
#include <random>
#include <sstream>

#include "volcal/market_data.hpp"

using namespace volcal;

namespace {

QuoteLoadResult load_string(const std::string& csv, QuoteSchema schema = {}) {
  std::istringstream in(csv);
  return load_quotes(in, schema);
}

}  // namespace

TEST_SUITE("market_data") {

TEST_CASE("black-scholes matches independently computed reference values") {
  // Reference prices computed with a separate implementation (erf-based
  // normal CDF, double precision).
  CHECK(bs_call_price(100, 100, 1.0, 0.05, 0.02, 0.2) ==
        doctest::Approx(9.227005508154036).epsilon(1e-12));
  CHECK(bs_call_price(100, 80, 0.5, 0.05, 0.02, 0.2) ==
        doctest::Approx(21.216114202558430).epsilon(1e-12));
  CHECK(bs_call_price(100, 120, 1.5, 0.05, 0.02, 0.3) ==
        doctest::Approx(9.078677184017721).epsilon(1e-12));
  CHECK(bs_call_price(2772.7, 2772.7, 1.0, 0.01, 0.034, 0.18) ==
        doctest::Approx(163.697991245726).epsilon(1e-10));
}

TEST_CASE("black-scholes degenerates to discounted intrinsic value") {
  // vol -> 0: forward is above strike here, so the call is exercised surely.
  const double f = 100.0 * std::exp((0.05 - 0.02) * 2.0);
  const double expect = std::exp(-0.05 * 2.0) * (f - 80.0);
  CHECK(bs_call_price(100, 80, 2.0, 0.05, 0.02, 0.0) == doctest::Approx(expect).epsilon(1e-12));
  // T -> 0: plain intrinsic.
  CHECK(bs_call_price(100, 80, 0.0, 0.05, 0.02, 0.2) == doctest::Approx(20.0).epsilon(1e-12));
  CHECK(bs_call_price(100, 120, 0.0, 0.05, 0.02, 0.2) == doctest::Approx(0.0));
}

TEST_CASE("implied vol round-trips the pricer over a strike/maturity/vol grid") {
  // Combos whose time value (or whole price) is under 1e-4 carry essentially
  // no vol information in double precision, so the round trip is only
  // required where the price actually determines the vol.
  int tested = 0;
  for (double strike : {60.0, 90.0, 100.0, 110.0, 140.0})
    for (double maturity : {0.1, 0.5, 1.0, 2.0})
      for (double vol : {0.05, 0.15, 0.3, 0.8}) {
        const double price = bs_call_price(100, strike, maturity, 0.05, 0.02, vol);
        const double bound = std::max(
            100.0 * std::exp(-0.02 * maturity) - strike * std::exp(-0.05 * maturity), 0.0);
        if (price - bound < 1e-4 || price < 1e-4) continue;
        ++tested;
        const double iv = bs_implied_vol(price, 100, strike, maturity, 0.05, 0.02);
        CHECK(iv == doctest::Approx(vol).epsilon(1e-8));
      }
  CHECK(tested >= 60);  // the guard must not hollow out the grid
}

TEST_CASE("implied vol reports unattainable prices with a negative return") {
  // Below intrinsic and above spot are both outside the attainable range.
  CHECK(bs_implied_vol(1.0, 100, 80, 1.0, 0.05, 0.02) < 0.0);
  CHECK(bs_implied_vol(101.0, 100, 80, 1.0, 0.05, 0.02) < 0.0);
}

TEST_CASE("quotes load from a mid column and come back sorted") {
  QuoteLoadResult res = load_string(
      "strike,maturity,mid\n"
      "110,1.0,4.0\n"
      "90,0.5,12.0\n"
      "110,0.5,2.5\n");
  REQUIRE(res.quotes.size() == 3);
  CHECK(!res.has_roles);
  CHECK(res.quotes[0].maturity == 0.5);
  CHECK(res.quotes[0].strike == 90.0);
  CHECK(res.quotes[1].strike == 110.0);
  CHECK(res.quotes[2].maturity == 1.0);
  CHECK(res.quotes[1].mid == 2.5);
}

TEST_CASE("bid/ask columns average to the mid") {
  QuoteLoadResult res = load_string(
      "maturity,strike,bid,ask\n"
      "0.5,100,4.0,5.0\n");
  REQUIRE(res.quotes.size() == 1);
  CHECK(res.quotes[0].mid == doctest::Approx(4.5));
}

TEST_CASE("implied-vol columns convert through the pricer") {
  QuoteSchema schema;
  schema.spot = 100.0;
  schema.rate = 0.05;
  schema.dividend = 0.02;
  QuoteLoadResult res = load_string(
      "maturity,strike,implied_vol\n"
      "1.0,100,0.2\n",
      schema);
  REQUIRE(res.quotes.size() == 1);
  CHECK(res.quotes[0].mid == doctest::Approx(9.227005508154036).epsilon(1e-12));
}

TEST_CASE("implied-vol columns without a spot are a config error") {
  CHECK_THROWS_AS(load_string("maturity,strike,implied_vol\n1.0,100,0.2\n"), ConfigError);
}

TEST_CASE("role column is parsed and flagged") {
  QuoteLoadResult res = load_string(
      "maturity,strike,mid,role\n"
      "0.5,100,5.0,train\n"
      "1.0,100,7.0,validate\n");
  CHECK(res.has_roles);
  CHECK(res.quotes[0].role == QuoteRole::train);
  CHECK(res.quotes[1].role == QuoteRole::validate);
}

TEST_CASE("structural problems in the quote file throw typed errors") {
  CHECK_THROWS_AS(load_string("maturity,mid\n0.5,4\n"), MissingColumnError);
  CHECK_THROWS_AS(load_string("strike,mid\n100,4\n"), MissingColumnError);
  CHECK_THROWS_AS(load_string("maturity,strike\n0.5,100\n"), MissingColumnError);
  CHECK_THROWS_AS(load_string("maturity,strike,mid\n0.5,-100,4\n"), NonPositiveStrikeError);
  CHECK_THROWS_AS(load_string("maturity,strike,mid\n0.5,100,4\n0.5,100,5\n"),
                  DuplicateQuoteError);
  CHECK_THROWS_AS(load_string("maturity,strike,mid\n0.5,100\n"), MalformedRowError);
  CHECK_THROWS_AS(load_string("maturity,strike,mid\n0.5,100,abc\n"), MalformedRowError);
  CHECK_THROWS_AS(load_string("maturity,strike,mid\n-0.5,100,4\n"), MalformedRowError);
}

TEST_CASE("malformed rows report their line number") {
  try {
    load_string("maturity,strike,mid\n0.5,100,4\n1.0,90,oops\n");
    FAIL("expected MalformedRowError");
  } catch (const MalformedRowError& e) {
    CHECK(std::string(e.what()).find("3") != std::string::npos);
  }
}

TEST_CASE("implausible mids are dropped with a warning rather than throwing") {
  QuoteLoadResult res = load_string(
      "maturity,strike,mid\n"
      "0.5,100,-1.0\n"
      "0.5,110,4.0\n");
  CHECK(res.quotes.size() == 1);
  CHECK(res.warnings.size() == 1);
}

TEST_CASE("decreasing-in-strike violations only warn") {
  QuoteLoadResult res = load_string(
      "maturity,strike,mid\n"
      "0.5,100,4.0\n"
      "0.5,110,6.0\n");  // call price increasing in strike: suspicious but kept
  CHECK(res.quotes.size() == 2);
  CHECK(!res.warnings.empty());
}

TEST_CASE("domain map round-trips uniformly sampled points") {
  MarketParams params;
  params.spot = 100;
  params.rate = 0.05;
  params.dividend = 0.02;
  params.t_max = 2.0;
  params.k_min = 40.0;
  params.k_max = 215.0;
  DomainMap map{params.t_max, params.k_min, params.k_max};

  std::mt19937_64 engine(7);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    const double t = unit(engine) * params.t_max;
    const double k = params.k_min + unit(engine) * (params.k_max - params.k_min);
    CHECK(map.t_of_u(map.u_of_t(t)) == doctest::Approx(t).epsilon(1e-12));
    CHECK(map.k_of_v(map.v_of_k(k)) == doctest::Approx(k).epsilon(1e-12));
    CHECK(map.u_of_t(t) >= -0.5);
    CHECK(map.u_of_t(t) <= 0.5);
    CHECK(map.v_of_k(k) >= -0.5);
    CHECK(map.v_of_k(k) <= 0.5);
  }
  CHECK(map.u_of_t(0.0) == doctest::Approx(-0.5));
  CHECK(map.u_of_t(params.t_max) == doctest::Approx(0.5));
}

TEST_CASE("rescale_domain rejects degenerate boxes") {
  MarketParams params;
  params.spot = 100;
  params.t_max = 1.0;
  params.k_min = 100.0;
  params.k_max = 100.0;
  std::vector<OptionQuote> quotes{{0.5, 100.0, 5.0, QuoteRole::train}};
  CHECK_THROWS_AS(rescale_domain(quotes, params), DegenerateRangeError);
}

TEST_CASE("maturity cutoff splits quotes and relabels them") {
  std::vector<OptionQuote> quotes{{0.5, 100, 5, QuoteRole::train},
                                  {1.0, 100, 7, QuoteRole::train},
                                  {1.5, 100, 9, QuoteRole::train}};
  SplitRule rule;
  rule.kind = SplitRule::Kind::maturity_cutoff;
  rule.cutoff = 1.25;
  auto [train, validate] = split_train_validate(quotes, rule);
  REQUIRE(train.size() == 2);
  REQUIRE(validate.size() == 1);
  CHECK(validate[0].maturity == 1.5);
  CHECK(validate[0].role == QuoteRole::validate);
  for (const OptionQuote& q : train) CHECK(q.role == QuoteRole::train);
}

TEST_CASE("label split respects the role column") {
  std::vector<OptionQuote> quotes{{0.5, 100, 5, QuoteRole::validate},
                                  {1.0, 100, 7, QuoteRole::train}};
  SplitRule rule;
  rule.kind = SplitRule::Kind::labels;
  auto [train, validate] = split_train_validate(quotes, rule);
  CHECK(train.size() == 1);
  CHECK(train[0].maturity == 1.0);
  CHECK(validate.size() == 1);
}

TEST_CASE("an empty training side is an error") {
  std::vector<OptionQuote> quotes{{1.5, 100, 9, QuoteRole::validate}};
  SplitRule cutoff_rule;
  cutoff_rule.cutoff = 1.0;
  CHECK_THROWS_AS(split_train_validate(quotes, cutoff_rule), EmptyTrainingSetError);
  SplitRule label_rule;
  label_rule.kind = SplitRule::Kind::labels;
  CHECK_THROWS_AS(split_train_validate(quotes, label_rule), EmptyTrainingSetError);
}

TEST_CASE("market params validate their invariants") {
  MarketParams p;
  p.spot = 100;
  p.t_max = 1.0;
  p.k_min = 40;
  p.k_max = 215;
  CHECK_NOTHROW(p.validate());
  MarketParams bad = p;
  bad.spot = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = p;
  bad.k_min = 300;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = p;
  bad.t_max = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

}  // TEST_SUITE
