#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "llmembed/timing.hpp"

namespace llmembed {

/// Currency amounts are held as integer millionths of a unit.
using Micros = std::int64_t;

inline constexpr double kExtractWatts = 240.0;
inline constexpr double kDownstreamWatts = 45.0;
inline constexpr double kDefaultTariff = 0.065;       // per kWh
inline constexpr double kDefaultTokenPrice = 0.002;   // per 1k tokens

/// Declared wattage per named phase.
struct PowerProfile {
  std::map<std::string, double> watts;

  /// Extraction phases ("extract", "train_extract", "test_extract") at
  /// `extract_watts`; downstream phases ("fuse", "train", "eval", "infer",
  /// "predict") at `downstream_watts`.
  static PowerProfile defaults(double extract_watts = kExtractWatts, double downstream_watts = kDownstreamWatts);

  /// Throws Error(argument) for a phase with no declared wattage.
  double watts_for(std::string_view phase) const;
  void validate() const;
};

struct PhaseEnergy {
  std::string phase;
  double seconds = 0.0;
  double watts = 0.0;
  double kwh = 0.0;

  bool operator==(const PhaseEnergy&) const = default;
};

struct EnergyBreakdown {
  std::vector<PhaseEnergy> phases;
  double total_kwh = 0.0;
};

/// kWh = watts * seconds / 3.6e6 per phase, plus their sum.
EnergyBreakdown energy_kwh(std::span<const PhaseTiming> timings, const PowerProfile& profile);

/// kwh * tariff, rounded to the nearest micro-unit.
Micros electricity_bill(double kwh, double tariff_per_kwh);

/// token_count / 1000 * price_per_1k, rounded half-up to the nearest micro-unit.
Micros token_budget(std::uint64_t token_count, double price_per_1k);

Micros to_micros(double amount);
double from_micros(Micros amount);

/// Rounds half-up to `max_decimals`, then drops trailing zeros down to `min_decimals`.
std::string format_currency(Micros amount, int min_decimals, int max_decimals);
std::string format_bill(Micros amount);    // 2-5 decimals
std::string format_budget(Micros amount);  // 2 decimals

/// Ratio as a percentage with two significant digits, e.g. "0.0068%".
std::string format_percent(double ratio);

/// "hh:mm:ss", plain seconds ("810", "810.5") or with an "s" suffix.
double parse_duration(std::string_view text);
std::string format_duration(double seconds);

struct TokenUsage {
  std::uint64_t tokens = 0;
  double price_per_1k = kDefaultTokenPrice;
  Micros total = 0;

  bool operator==(const TokenUsage&) const = default;
};

struct CostReport {
  std::string label;
  std::vector<PhaseEnergy> phases;
  double total_kwh = 0.0;
  double billed_kwh = 0.0;  // total_kwh, or its rounded value when rounding was requested
  double tariff = kDefaultTariff;
  double bill_amount = 0.0;  // billed_kwh * tariff before rounding
  Micros bill = 0;
  std::optional<TokenUsage> tokens;

  Micros total_cost() const { return bill + (tokens ? tokens->total : 0); }

  nlohmann::json to_json() const;
  static CostReport from_json(const nlohmann::json& doc);
  std::string to_text() const;

  bool operator==(const CostReport&) const = default;
};

struct CostInputs {
  std::vector<PhaseTiming> timings;
  PowerProfile profile = PowerProfile::defaults();
  /// Energy measured elsewhere, reported as its own "declared" line.
  std::optional<double> declared_kwh;
  double tariff = kDefaultTariff;
  /// Round the total energy to this many decimals before billing.
  std::optional<int> kwh_decimals;
  std::optional<std::uint64_t> tokens;
  double token_price = kDefaultTokenPrice;
};

CostReport build_cost_report(std::string label, const CostInputs& inputs);

struct CostComparison {
  Micros local_total = 0;
  Micros remote_total = 0;
  std::optional<double> ratio;  // local / remote; empty when remote is zero
  std::string percent;          // "undefined" when ratio is empty

  nlohmann::json to_json() const;
  std::string to_text() const;
};

CostComparison compare_report(const CostReport& local, const CostReport& remote);

}  // namespace llmembed
