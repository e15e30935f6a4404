#pragma once

// Pipeline configurations shared by the tests and the acceptance run.

#include "msmfe/pipeline.hpp"

namespace fixtures {

// Short-memory weights matching the simulator's one-period treatment effect:
// denominator on T_lag1, X and unit effects; numerator on the time trend only.
inline msmfe::PipelineConfig effect_config() {
  msmfe::PipelineConfig c;
  c.weights.treatment = "T";
  c.weights.covariates = {"X"};
  c.weights.window = 0;
  c.weights.treatment_lags = 1;
  c.weights.numerator_lags = 0;
  c.weights.numerator_unit_effects = false;
  msmfe::OutcomeSpec primary;
  primary.name = "primary";
  primary.outcome = "Y";
  primary.treatment_terms = {"T"};
  msmfe::OutcomeSpec naive = primary;
  naive.name = "naive";
  naive.weighted = false;
  c.outcomes = {primary, naive};
  return c;
}

// Library defaults: four-period window, three treatment lags, unit effects
// in both treatment models.
inline msmfe::PipelineConfig default_config() {
  msmfe::PipelineConfig c;
  c.weights.covariates = {"X"};
  msmfe::OutcomeSpec primary;
  primary.name = "primary";
  primary.outcome = "Y";
  primary.treatment_terms = {"T"};
  c.outcomes = {primary};
  return c;
}

}  // namespace fixtures
