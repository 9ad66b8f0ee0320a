#include <doctest.h>

#include <random>

#include "llmembed/cost.hpp"
#include "llmembed/error.hpp"

using namespace llmembed;

namespace {

CostInputs sst2_inputs() {
  CostInputs in;
  in.timings = {{"train_extract", parse_duration("00:13:30")},
                {"test_extract", parse_duration("00:00:10")},
                {"train", parse_duration("00:08:30")},
                {"infer", parse_duration("00:00:01")}};
  return in;
}

}  // namespace

TEST_CASE("token budgets") {
  CHECK(format_budget(token_budget(28719397, 0.002)) == "57.44");
  CHECK(format_budget(token_budget(107027342, 0.002)) == "214.05");
  CHECK(token_budget(0, 0.002) == 0);
  CHECK(format_budget(token_budget(0, 0.002)) == "0.00");
  CHECK(token_budget(1000, 0.002) == 2000);
}

TEST_CASE("electricity bills") {
  CHECK(electricity_bill(0.06, 0.065) == 3900);
  CHECK(format_bill(electricity_bill(0.06, 0.065)) == "0.0039");
  CHECK(format_bill(electricity_bill(1.51, 0.065)) == "0.09815");
  CHECK(electricity_bill(0.0, 0.065) == 0);
  CHECK(format_bill(0) == "0.00");
  CHECK_THROWS_AS(electricity_bill(-1.0, 0.065), Error);
}

TEST_CASE("currency formatting") {
  CHECK(format_currency(1234567, 2, 2) == "1.23");
  CHECK(format_currency(1235000, 2, 2) == "1.24");
  CHECK(format_currency(98150, 2, 5) == "0.09815");
  CHECK(format_currency(100000, 2, 5) == "0.10");
  CHECK(format_currency(-2500, 2, 5) == "-0.0025");
  CHECK(format_currency(57440000, 2, 6) == "57.44");
}

TEST_CASE("energy") {
  const PowerProfile p = PowerProfile::defaults();
  const std::vector<PhaseTiming> hour{{"x", 3600.0}};
  PowerProfile kw;
  kw.watts["x"] = 1000.0;
  CHECK(energy_kwh(hour, kw).total_kwh == 1.0);

  const std::vector<PhaseTiming> extract{{"train_extract", 810.0}, {"test_extract", 10.0}};
  const auto e = energy_kwh(extract, p);
  CHECK(e.total_kwh == doctest::Approx(0.0547).epsilon(1e-3));
  CHECK(e.phases[0].watts == 240.0);

  const std::vector<PhaseTiming> zero{{"train", 0.0}};
  CHECK(energy_kwh(zero, p).total_kwh == 0.0);

  const std::vector<PhaseTiming> unknown{{"mystery", 1.0}};
  try {
    energy_kwh(unknown, p);
    FAIL("no error");
  } catch (const Error& e2) {
    CHECK(e2.code() == ErrorCode::argument);
    CHECK(std::string(e2.what()).find("mystery") != std::string::npos);
  }
  const std::vector<PhaseTiming> negative{{"train", -1.0}};
  CHECK_THROWS_AS(energy_kwh(negative, p), Error);
  PowerProfile bad;
  bad.watts["x"] = 0.0;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("SST-2 and MR rows from measured phase timings") {
  CostInputs in = sst2_inputs();
  const auto raw = build_cost_report("sst2", in);
  CHECK(raw.total_kwh == doctest::Approx(0.0610542).epsilon(1e-6));
  in.kwh_decimals = 2;
  const auto rounded = build_cost_report("sst2", in);
  CHECK(rounded.billed_kwh == 0.06);
  CHECK(format_bill(rounded.bill) == "0.0039");

  CostInputs mr;
  mr.timings = {{"train_extract", parse_duration("05:43:45")},
                {"test_extract", parse_duration("00:33:21")},
                {"train", parse_duration("00:05:13")},
                {"infer", parse_duration("00:00:02")}};
  mr.kwh_decimals = 2;
  const auto m = build_cost_report("mr", mr);
  CHECK(m.billed_kwh == 1.51);
  CHECK(format_bill(m.bill) == "0.09815");

  CostInputs declared;
  declared.declared_kwh = 0.06;
  CHECK(format_bill(build_cost_report("d", declared).bill) == "0.0039");
}

TEST_CASE("comparison") {
  CostInputs local;
  local.declared_kwh = 0.06;
  CostInputs remote;
  remote.tokens = 28719397;
  const auto c = compare_report(build_cost_report("l", local), build_cost_report("r", remote));
  CHECK(c.percent == "0.0068%");
  CHECK(c.ratio.has_value());

  CHECK(compare_report(build_cost_report("a", local), build_cost_report("b", local)).percent == "100%");
  const auto undefined = compare_report(build_cost_report("a", local), build_cost_report("z", CostInputs{}));
  CHECK(undefined.percent == "undefined");
  CHECK_FALSE(undefined.ratio.has_value());
  CHECK(undefined.to_json()["ratio"] == "undefined");
}

TEST_CASE("percent formatting keeps two significant digits") {
  CHECK(format_percent(0.5) == "50%");
  CHECK(format_percent(0.123) == "12%");
  CHECK(format_percent(0.0999) == "10%");
  CHECK(format_percent(0.000016) == "0.0016%");
  CHECK(format_percent(2.0) == "200%");
}

TEST_CASE("durations") {
  CHECK(parse_duration("00:13:30") == 810.0);
  CHECK(parse_duration("13:30") == 810.0);
  CHECK(parse_duration("810") == 810.0);
  CHECK(parse_duration("810.5s") == 810.5);
  CHECK(parse_duration("138:25:05") == 138 * 3600 + 25 * 60 + 5);
  for (const char* bad : {"-5", "1:-3", "", "abc", "1:2:3:4", "12x"}) CHECK_THROWS_AS(parse_duration(bad), Error);
  CHECK(format_duration(810.0) == "00:13:30");
  CHECK(format_duration(498365.0) == "138:26:05");
}

TEST_CASE("doubling durations doubles energy and bill") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 50000.0);
  for (int t = 0; t < 500; ++t) {
    CostInputs a;
    for (const char* phase : {"train_extract", "test_extract", "train", "infer"}) a.timings.push_back({phase, u(rng)});
    CostInputs b = a;
    for (auto& p : b.timings) p.seconds *= 2.0;
    const auto ra = build_cost_report("a", a);
    const auto rb = build_cost_report("b", b);
    for (std::size_t i = 0; i < ra.phases.size(); ++i) CHECK(rb.phases[i].kwh == 2.0 * ra.phases[i].kwh);
    CHECK(rb.total_kwh == 2.0 * ra.total_kwh);
    CHECK(rb.bill_amount == 2.0 * ra.bill_amount);
    // The micro-unit bill is the exact amount rounded once, so it can differ by one micro.
    CHECK(std::llabs(rb.bill - 2 * ra.bill) <= 1);
  }
}

TEST_CASE("totals equal the sum of parts") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1e6);
  for (int t = 0; t < 200; ++t) {
    CostInputs in;
    const int n = 1 + int(rng() % 6);
    for (int i = 0; i < n; ++i) in.timings.push_back({i % 2 ? "train" : "train_extract", u(rng)});
    const auto r = build_cost_report("x", in);
    double sum = 0.0;
    for (const auto& p : r.phases) sum += p.watts * p.seconds / 3.6e6;
    CHECK(std::fabs(r.total_kwh - sum) <= 1e-9);
  }
}

TEST_CASE("report JSON round trip") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1e5);
  for (int t = 0; t < 100; ++t) {
    CostInputs in;
    in.timings = {{"train_extract", u(rng)}, {"train", u(rng)}};
    in.tariff = u(rng) / 1e5;
    if (t % 2) in.tokens = rng() % 1000000000;
    if (t % 3 == 0) in.kwh_decimals = 2;
    const auto r = build_cost_report("run " + std::to_string(t), in);
    const auto back = CostReport::from_json(nlohmann::json::parse(r.to_json().dump()));
    CHECK(back == r);
  }
  CHECK_THROWS_AS(CostReport::from_json(nlohmann::json::object()), Error);
}

TEST_CASE("text rendering") {
  CostInputs in = sst2_inputs();
  in.kwh_decimals = 2;
  in.tokens = 28719397;
  const std::string text = build_cost_report("local", in).to_text();
  CHECK(text.find("00:13:30") != std::string::npos);
  CHECK(text.find("$0.0039") != std::string::npos);
  CHECK(text.find("$57.44") != std::string::npos);
}
