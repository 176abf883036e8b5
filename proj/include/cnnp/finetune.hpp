#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stop_token>
#include <vector>

#include <nlohmann/json.hpp>

#include "cnnp/datasets.hpp"
#include "cnnp/model.hpp"
#include "cnnp/optimizer.hpp"

namespace cnnp {

struct FineTuneConfig {
  double delta_loss = 1e-6;
  double target_accuracy = 0.985;
  int max_epochs = 30;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  Index batch_size = 100;
  std::uint64_t seed = 0;
};

/// Throws invalid_argument on out-of-range fields.
void validate(const FineTuneConfig& config);

nlohmann::json to_json(const FineTuneConfig& config);
/// Missing keys keep their defaults.
FineTuneConfig finetune_config_from_json(const nlohmann::json& j, FineTuneConfig base = {});

enum class TerminationReason { none, target_accuracy, delta_loss, max_epochs, cancelled };

std::string_view to_string(TerminationReason r);
TerminationReason termination_reason_from_string(std::string_view name);

struct FineTuneTrace {
  std::vector<double> epoch_loss;      // mean training loss per epoch
  std::vector<double> batch_loss;      // every batch, in order
  std::vector<double> epoch_accuracy;  // test accuracy after each epoch
  int epochs_used = 0;
  bool converged = false;
  TerminationReason reason = TerminationReason::none;
};

nlohmann::json to_json(const FineTuneTrace& trace);
FineTuneTrace trace_from_json(const nlohmann::json& j);

/// First criterion met after the last completed epoch, checked in the order
/// target accuracy, delta loss (needs two epochs), max epochs.
TerminationReason should_terminate(const FineTuneTrace& trace, const FineTuneConfig& config);

struct TraceStatistics {
  bool empty = true;
  double min_accuracy = 0.0;
  double max_accuracy = 0.0;
  double final_accuracy = 0.0;
  std::vector<double> loss_curve;
  int recovery_cost = 0;
};

TraceStatistics trace_statistics(const FineTuneTrace& trace);
nlohmann::json to_json(const TraceStatistics& stats);

struct FineTuneProgress {
  int epoch = 0;
  double mean_loss = 0.0;
  double test_accuracy = 0.0;
  bool done = false;
  TerminationReason reason = TerminationReason::none;
};

nlohmann::json to_json(const FineTuneProgress& p);

using ProgressCallback = std::function<void(const FineTuneProgress&)>;

struct FineTuneResult {
  Model model;
  FineTuneTrace trace;
};

/// Trains a copy of `model` with fresh optimizer state, one seeded shuffle
/// per epoch, evaluating `test` after every epoch until a termination
/// criterion fires. A stop request ends the run after the current batch with
/// reason `cancelled` and returns the input model unchanged.
FineTuneResult fine_tune(const Model& model, const Dataset& train, const Dataset& test,
                         const FineTuneConfig& config, const ProgressCallback& progress = {},
                         std::stop_token stop = {});

/// Fixed-length training from scratch or a checkpoint: `epochs` epochs, no
/// early termination.
FineTuneResult train_epochs(const Model& model, const Dataset& train, const Dataset& test, int epochs,
                            const FineTuneConfig& config, const ProgressCallback& progress = {},
                            std::stop_token stop = {});

}  // namespace cnnp
