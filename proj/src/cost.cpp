#include "llmembed/cost.hpp"

#include <cmath>
#include <cstdio>
#include <iomanip>
#include <sstream>

#include "llmembed/error.hpp"

namespace llmembed {
using json = nlohmann::json;

PowerProfile PowerProfile::defaults(double extract_watts, double downstream_watts) {
  PowerProfile p;
  for (const char* phase : {"extract", "train_extract", "test_extract"}) p.watts[phase] = extract_watts;
  for (const char* phase : {"fuse", "train", "eval", "infer", "predict"}) p.watts[phase] = downstream_watts;
  p.validate();
  return p;
}

double PowerProfile::watts_for(std::string_view phase) const {
  const auto it = watts.find(std::string(phase));
  if (it == watts.end()) {
    throw Error(ErrorCode::argument, "no wattage declared for phase '" + std::string(phase) + "'");
  }
  return it->second;
}

void PowerProfile::validate() const {
  for (const auto& [phase, w] : watts) {
    if (!(w > 0.0) || !std::isfinite(w)) {
      throw Error(ErrorCode::validation, "wattage for phase '" + phase + "' must be positive");
    }
  }
}

EnergyBreakdown energy_kwh(std::span<const PhaseTiming> timings, const PowerProfile& profile) {
  EnergyBreakdown out;
  for (const auto& t : timings) {
    if (!(t.seconds >= 0.0) || !std::isfinite(t.seconds)) {
      throw Error(ErrorCode::validation, "duration of phase '" + t.phase + "' must be non-negative");
    }
    const double watts = profile.watts_for(t.phase);
    if (!(watts > 0.0)) throw Error(ErrorCode::validation, "wattage for phase '" + t.phase + "' must be positive");
    PhaseEnergy e{t.phase, t.seconds, watts, watts * t.seconds / 3.6e6};
    out.total_kwh += e.kwh;
    out.phases.push_back(std::move(e));
  }
  return out;
}

Micros to_micros(double amount) { return static_cast<Micros>(std::llround(amount * 1e6)); }
double from_micros(Micros amount) { return static_cast<double>(amount) / 1e6; }

Micros electricity_bill(double kwh, double tariff_per_kwh) {
  if (!(kwh >= 0.0) || !(tariff_per_kwh >= 0.0)) {
    throw Error(ErrorCode::validation, "energy and tariff must be non-negative");
  }
  return static_cast<Micros>(std::llround(kwh * static_cast<double>(to_micros(tariff_per_kwh))));
}

Micros token_budget(std::uint64_t token_count, double price_per_1k) {
  if (!(price_per_1k >= 0.0)) throw Error(ErrorCode::validation, "token price must be non-negative");
  const auto price = static_cast<unsigned __int128>(to_micros(price_per_1k));
  const unsigned __int128 scaled = static_cast<unsigned __int128>(token_count) * price;
  return static_cast<Micros>((scaled + 500) / 1000);
}

std::string format_currency(Micros amount, int min_decimals, int max_decimals) {
  const bool negative = amount < 0;
  std::uint64_t magnitude = negative ? static_cast<std::uint64_t>(-amount) : static_cast<std::uint64_t>(amount);
  std::uint64_t step = 1;
  for (int i = max_decimals; i < 6; ++i) step *= 10;
  magnitude = (magnitude + step / 2) / step;  // units of 10^-max_decimals

  std::uint64_t scale = 1;
  for (int i = 0; i < max_decimals; ++i) scale *= 10;
  std::string frac = std::to_string(magnitude % scale);
  frac.insert(0, static_cast<std::size_t>(max_decimals) - frac.size(), '0');
  while (static_cast<int>(frac.size()) > min_decimals && frac.back() == '0') frac.pop_back();

  std::string out = negative ? "-" : "";
  out += std::to_string(magnitude / scale);
  if (!frac.empty()) out += "." + frac;
  return out;
}

std::string format_bill(Micros amount) { return format_currency(amount, 2, 5); }
std::string format_budget(Micros amount) { return format_currency(amount, 2, 2); }

std::string format_percent(double ratio) {
  const double pct = ratio * 100.0;
  if (pct == 0.0) return "0%";
  const int exponent = static_cast<int>(std::floor(std::log10(std::fabs(pct))));
  const double unit = std::pow(10.0, exponent - 1);
  double rounded = std::round(pct / unit) * unit;
  // Rounding can carry into the next decade (e.g. 9.96 -> 10).
  const int rounded_exp = static_cast<int>(std::floor(std::log10(std::fabs(rounded))));
  const int decimals = std::max(0, 1 - rounded_exp);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f%%", decimals, rounded);
  return buf;
}

double parse_duration(std::string_view text) {
  std::string s(text);
  if (!s.empty() && s.back() == 's') s.pop_back();
  auto fail = [&]() -> double {
    throw Error(ErrorCode::validation, "cannot parse duration '" + std::string(text) + "'");
  };
  if (s.empty()) return fail();
  double seconds = 0.0;
  if (s.find(':') != std::string::npos) {
    std::istringstream in(s);
    std::string part;
    std::vector<double> fields;
    while (std::getline(in, part, ':')) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(part, &used);
      } catch (const std::exception&) {
        return fail();
      }
      if (used != part.size()) return fail();
      fields.push_back(v);
    }
    if (fields.size() < 2 || fields.size() > 3) return fail();
    for (double f : fields) seconds = seconds * 60.0 + f;
    for (double f : fields) {
      if (f < 0.0) seconds = -1.0;
    }
  } else {
    std::size_t used = 0;
    try {
      seconds = std::stod(s, &used);
    } catch (const std::exception&) {
      return fail();
    }
    if (used != s.size()) return fail();
  }
  if (!(seconds >= 0.0) || !std::isfinite(seconds)) {
    throw Error(ErrorCode::validation, "duration '" + std::string(text) + "' must be non-negative");
  }
  return seconds;
}

std::string format_duration(double seconds) {
  const auto total = static_cast<long long>(std::llround(seconds));
  char buf[32];
  std::snprintf(buf, sizeof buf, "%02lld:%02lld:%02lld", total / 3600, (total / 60) % 60, total % 60);
  return buf;
}

json CostReport::to_json() const {
  json doc;
  doc["label"] = label;
  doc["phases"] = json::array();
  for (const auto& p : phases) {
    doc["phases"].push_back({{"phase", p.phase}, {"seconds", p.seconds}, {"watts", p.watts}, {"kwh", p.kwh}});
  }
  doc["total_kwh"] = total_kwh;
  doc["billed_kwh"] = billed_kwh;
  doc["tariff_per_kwh"] = tariff;
  doc["bill_amount"] = bill_amount;
  doc["bill_micros"] = bill;
  doc["bill"] = format_bill(bill);
  if (tokens) {
    doc["tokens"] = {{"count", tokens->tokens},
                     {"price_per_1k", tokens->price_per_1k},
                     {"total_micros", tokens->total},
                     {"total", format_budget(tokens->total)}};
  }
  doc["total_cost_micros"] = total_cost();
  return doc;
}

CostReport CostReport::from_json(const json& doc) {
  CostReport r;
  try {
    r.label = doc.at("label").get<std::string>();
    for (const auto& p : doc.at("phases")) {
      r.phases.push_back({p.at("phase").get<std::string>(), p.at("seconds").get<double>(), p.at("watts").get<double>(),
                          p.at("kwh").get<double>()});
    }
    r.total_kwh = doc.at("total_kwh").get<double>();
    r.billed_kwh = doc.at("billed_kwh").get<double>();
    r.tariff = doc.at("tariff_per_kwh").get<double>();
    r.bill_amount = doc.at("bill_amount").get<double>();
    r.bill = doc.at("bill_micros").get<Micros>();
    if (doc.contains("tokens")) {
      const auto& t = doc.at("tokens");
      r.tokens = TokenUsage{t.at("count").get<std::uint64_t>(), t.at("price_per_1k").get<double>(),
                            t.at("total_micros").get<Micros>()};
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::format, std::string("malformed cost report: ") + e.what());
  }
  return r;
}

std::string CostReport::to_text() const {
  std::ostringstream os;
  os << label << '\n';
  if (!phases.empty()) {
    os << std::left << std::setw(16) << "process" << std::right << std::setw(10) << "runtime" << std::setw(8)
       << "watts" << std::setw(14) << "energy(kWh)" << '\n';
    for (const auto& p : phases) {
      os << std::left << std::setw(16) << p.phase << std::right << std::setw(10) << format_duration(p.seconds)
         << std::setw(8) << p.watts << std::setw(14) << std::fixed << std::setprecision(6) << p.kwh << '\n';
      os.unsetf(std::ios::fixed);
    }
    double total_seconds = 0.0;
    for (const auto& p : phases) total_seconds += p.seconds;
    os << std::left << std::setw(16) << "total" << std::right << std::setw(10) << format_duration(total_seconds)
       << std::setw(8) << "" << std::setw(14) << std::fixed << std::setprecision(6) << total_kwh << '\n';
    os.unsetf(std::ios::fixed);
    if (billed_kwh != total_kwh) os << "billed energy (rounded): " << billed_kwh << " kWh\n";
    os << std::setprecision(6) << "electricity bill @ $" << tariff << "/kWh: $" << format_bill(bill) << '\n';
  }
  if (tokens) {
    os << "token budget: " << tokens->tokens << " tokens @ $" << tokens->price_per_1k << "/1k = $"
       << format_budget(tokens->total) << '\n';
  }
  return os.str();
}

CostReport build_cost_report(std::string label, const CostInputs& in) {
  if (!(in.tariff >= 0.0) || !std::isfinite(in.tariff)) {
    throw Error(ErrorCode::validation, "tariff must be non-negative");
  }
  in.profile.validate();
  const EnergyBreakdown energy = energy_kwh(in.timings, in.profile);
  CostReport r;
  r.label = std::move(label);
  r.phases = energy.phases;
  r.total_kwh = energy.total_kwh;
  if (in.declared_kwh) {
    if (!(*in.declared_kwh >= 0.0) || !std::isfinite(*in.declared_kwh)) {
      throw Error(ErrorCode::validation, "declared energy must be non-negative");
    }
    r.phases.push_back({"declared", 0.0, 0.0, *in.declared_kwh});
    r.total_kwh += *in.declared_kwh;
  }
  r.billed_kwh = r.total_kwh;
  if (in.kwh_decimals) {
    if (*in.kwh_decimals < 0 || *in.kwh_decimals > 9) {
      throw Error(ErrorCode::validation, "kWh rounding must use 0-9 decimals");
    }
    const double scale = std::pow(10.0, *in.kwh_decimals);
    r.billed_kwh = std::round(r.total_kwh * scale) / scale;
  }
  r.tariff = in.tariff;
  r.bill_amount = r.billed_kwh * in.tariff;
  r.bill = electricity_bill(r.billed_kwh, in.tariff);
  if (in.tokens) r.tokens = TokenUsage{*in.tokens, in.token_price, token_budget(*in.tokens, in.token_price)};
  return r;
}

json CostComparison::to_json() const {
  json doc{{"local_total_micros", local_total}, {"remote_total_micros", remote_total}, {"percent", percent}};
  doc["ratio"] = ratio ? json(*ratio) : json("undefined");
  return doc;
}

std::string CostComparison::to_text() const {
  std::ostringstream os;
  os << "local $" << format_bill(local_total) << " vs remote $" << format_budget(remote_total) << ": " << percent
     << '\n';
  return os.str();
}

CostComparison compare_report(const CostReport& local, const CostReport& remote) {
  CostComparison c;
  c.local_total = local.total_cost();
  c.remote_total = remote.total_cost();
  if (c.remote_total == 0) {
    c.percent = "undefined";
  } else {
    c.ratio = static_cast<double>(c.local_total) / static_cast<double>(c.remote_total);
    c.percent = format_percent(*c.ratio);
  }
  return c;
}

}  // namespace llmembed
