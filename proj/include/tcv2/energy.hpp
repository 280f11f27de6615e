#pragma once

// Training energy and CO2 estimate: kWh = hours * watts / 1000, kg = kWh * intensity.

#include <cmath>
#include <string>

#include "tcv2/errors.hpp"

namespace tcv2 {

struct EnergyEstimate {
  double hours = 0.0;
  double watts = 0.0;
  double energy_kwh = 0.0;
  double intensity_low = 0.0;   // kg CO2 per kWh
  double intensity_high = 0.0;
  double co2_low_kg = 0.0;
  double co2_high_kg = 0.0;

  bool is_range() const { return intensity_low != intensity_high; }
};

inline EnergyEstimate energy_estimate(double hours, double watts, double intensity_low, double intensity_high) {
  auto check = [](double v, const char* what) {
    if (!std::isfinite(v) || v < 0.0) throw DomainError(std::string(what) + " must be finite and >= 0");
  };
  check(hours, "hours");
  check(watts, "watts");
  check(intensity_low, "intensity");
  check(intensity_high, "intensity");
  if (intensity_high < intensity_low) throw DomainError("intensity range must be low <= high");
  EnergyEstimate e;
  e.hours = hours;
  e.watts = watts;
  e.energy_kwh = hours * watts / 1000.0;
  e.intensity_low = intensity_low;
  e.intensity_high = intensity_high;
  e.co2_low_kg = e.energy_kwh * intensity_low;
  e.co2_high_kg = e.energy_kwh * intensity_high;
  return e;
}

inline EnergyEstimate energy_estimate(double hours, double watts, double intensity) {
  return energy_estimate(hours, watts, intensity, intensity);
}

}  // namespace tcv2
