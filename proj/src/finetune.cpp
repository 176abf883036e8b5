#include "cnnp/finetune.hpp"

#include <algorithm>
#include <cmath>

#include <spdlog/spdlog.h>

#include "cnnp/kernels.hpp"

namespace cnnp {
namespace {

std::uint64_t epoch_seed(std::uint64_t seed, int epoch) {
  return seed ^ (static_cast<std::uint64_t>(epoch) * 0x9E3779B97F4A7C15ULL);
}

FineTuneResult run(const Model& model, const Dataset& train, const Dataset& test, const FineTuneConfig& config,
                   int epoch_limit, bool early_stop, const ProgressCallback& progress, std::stop_token stop) {
  validate(config);
  FineTuneResult out{model, {}};
  FineTuneTrace& trace = out.trace;
  if (epoch_limit <= 0) {
    trace.reason = TerminationReason::max_epochs;
    if (progress) progress({0, 0.0, 0.0, true, trace.reason});
    return out;
  }
  if (train.size() == 0) throw Error(ErrorCode::empty_dataset, "training set is empty");
  if (test.size() == 0) throw Error(ErrorCode::empty_dataset, "test set is empty");

  Model work = model;
  OptimizerState<float> opt;
  opt.kind = config.optimizer;
  opt.learning_rate = config.learning_rate;

  for (int epoch = 0; epoch < epoch_limit; ++epoch) {
    double sum = 0.0;
    Index seen = 0;
    for (const auto& idx : batches(static_cast<std::size_t>(train.size()), static_cast<std::size_t>(config.batch_size),
                                   epoch_seed(config.seed, epoch), true)) {
      if (stop.stop_requested()) {
        trace.reason = TerminationReason::cancelled;
        if (progress) progress({trace.epochs_used, 0.0, 0.0, true, trace.reason});
        return {model, std::move(trace)};
      }
      const Batch b = gather(train, idx);
      const auto pass = forward_pass(work, b.images);
      const auto loss = softmax_cross_entropy(pass.logits, b.labels);
      const auto grads = backward_pass(work, pass.cache, loss.grad_logits);
      optimizer_step(opt, work, grads.params);
      trace.batch_loss.push_back(loss.loss);
      sum += loss.loss * static_cast<double>(idx.size());
      seen += static_cast<Index>(idx.size());
    }
    trace.epoch_loss.push_back(sum / static_cast<double>(seen));
    trace.epoch_accuracy.push_back(evaluate(work, test).accuracy);
    trace.epochs_used = epoch + 1;

    FineTuneConfig limits = config;
    limits.max_epochs = epoch_limit;
    if (!early_stop) {
      limits.target_accuracy = 2.0;
      limits.delta_loss = 0.0;
    }
    trace.reason = should_terminate(trace, limits);
    trace.converged = trace.reason == TerminationReason::target_accuracy || trace.reason == TerminationReason::delta_loss;
    const bool done = trace.reason != TerminationReason::none;
    spdlog::debug("epoch {}: loss {:.6f} accuracy {:.4f}", trace.epochs_used, trace.epoch_loss.back(),
                  trace.epoch_accuracy.back());
    if (progress) progress({trace.epochs_used, trace.epoch_loss.back(), trace.epoch_accuracy.back(), done, trace.reason});
    if (done) break;
  }
  out.model = std::move(work);
  return out;
}

}  // namespace

void validate(const FineTuneConfig& c) {
  if (c.max_epochs < 0) throw Error(ErrorCode::invalid_argument, "max_epochs must be >= 0");
  if (!(c.target_accuracy >= 0.0 && c.target_accuracy <= 1.0)) {
    throw Error(ErrorCode::invalid_argument, "target_accuracy must be in [0, 1]");
  }
  if (!(c.delta_loss >= 0.0)) throw Error(ErrorCode::invalid_argument, "delta_loss must be >= 0");
  if (!(c.learning_rate > 0.0)) throw Error(ErrorCode::invalid_argument, "learning_rate must be > 0");
  if (c.batch_size < 1) throw Error(ErrorCode::invalid_argument, "batch_size must be >= 1");
}

nlohmann::json to_json(const FineTuneConfig& c) {
  return {{"delta_loss", c.delta_loss},     {"target_accuracy", c.target_accuracy},
          {"max_epochs", c.max_epochs},     {"learning_rate", c.learning_rate},
          {"optimizer", to_string(c.optimizer)}, {"batch_size", c.batch_size},
          {"seed", c.seed}};
}

FineTuneConfig finetune_config_from_json(const nlohmann::json& j, FineTuneConfig c) {
  if (!j.is_object()) throw Error(ErrorCode::invalid_argument, "fine-tune config must be a JSON object");
  try {
    c.delta_loss = j.value("delta_loss", c.delta_loss);
    c.target_accuracy = j.value("target_accuracy", c.target_accuracy);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.learning_rate = j.value("learning_rate", j.value("lr", c.learning_rate));
    if (j.contains("optimizer")) c.optimizer = optimizer_kind_from_string(j["optimizer"].get<std::string>());
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::invalid_argument, std::string("bad fine-tune config: ") + e.what());
  }
  validate(c);
  return c;
}

std::string_view to_string(TerminationReason r) {
  switch (r) {
    case TerminationReason::none: return "none";
    case TerminationReason::target_accuracy: return "target_accuracy";
    case TerminationReason::delta_loss: return "delta_loss";
    case TerminationReason::max_epochs: return "max_epochs";
    case TerminationReason::cancelled: return "cancelled";
  }
  return "none";
}

TerminationReason termination_reason_from_string(std::string_view name) {
  for (auto r : {TerminationReason::none, TerminationReason::target_accuracy, TerminationReason::delta_loss,
                 TerminationReason::max_epochs, TerminationReason::cancelled}) {
    if (to_string(r) == name) return r;
  }
  throw Error(ErrorCode::invalid_argument, "unknown termination reason '" + std::string(name) + "'");
}

TerminationReason should_terminate(const FineTuneTrace& trace, const FineTuneConfig& config) {
  const std::size_t n = trace.epoch_accuracy.size();
  if (n >= 1 && trace.epoch_accuracy.back() >= config.target_accuracy) return TerminationReason::target_accuracy;
  const std::size_t m = trace.epoch_loss.size();
  if (m >= 2 && std::abs(trace.epoch_loss[m - 1] - trace.epoch_loss[m - 2]) < config.delta_loss) {
    return TerminationReason::delta_loss;
  }
  if (trace.epochs_used >= config.max_epochs) return TerminationReason::max_epochs;
  return TerminationReason::none;
}

TraceStatistics trace_statistics(const FineTuneTrace& trace) {
  TraceStatistics s;
  s.recovery_cost = trace.epochs_used;
  s.loss_curve = trace.batch_loss;
  if (trace.epoch_accuracy.empty()) return s;
  s.empty = false;
  s.min_accuracy = *std::min_element(trace.epoch_accuracy.begin(), trace.epoch_accuracy.end());
  s.max_accuracy = *std::max_element(trace.epoch_accuracy.begin(), trace.epoch_accuracy.end());
  s.final_accuracy = trace.epoch_accuracy.back();
  return s;
}

nlohmann::json to_json(const TraceStatistics& s) {
  nlohmann::json j = {{"empty", s.empty}, {"loss_curve", s.loss_curve}, {"recovery_cost", s.recovery_cost}};
  if (s.empty) {
    j["recovery"] = nullptr;
  } else {
    j["recovery"] = {{"min", s.min_accuracy}, {"max", s.max_accuracy}, {"final", s.final_accuracy}};
  }
  return j;
}

nlohmann::json to_json(const FineTuneTrace& t) {
  return {{"epoch_loss", t.epoch_loss},       {"batch_loss", t.batch_loss},
          {"epoch_accuracy", t.epoch_accuracy}, {"epochs_used", t.epochs_used},
          {"converged", t.converged},         {"reason", to_string(t.reason)}};
}

FineTuneTrace trace_from_json(const nlohmann::json& j) {
  try {
    FineTuneTrace t;
    t.epoch_loss = j.at("epoch_loss").get<std::vector<double>>();
    t.batch_loss = j.at("batch_loss").get<std::vector<double>>();
    t.epoch_accuracy = j.at("epoch_accuracy").get<std::vector<double>>();
    t.epochs_used = j.at("epochs_used").get<int>();
    t.converged = j.at("converged").get<bool>();
    t.reason = termination_reason_from_string(j.at("reason").get<std::string>());
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::invalid_argument, std::string("bad trace JSON: ") + e.what());
  }
}

nlohmann::json to_json(const FineTuneProgress& p) {
  return {{"epoch", p.epoch},
          {"mean_loss", p.mean_loss},
          {"test_accuracy", p.test_accuracy},
          {"done", p.done},
          {"reason", p.reason == TerminationReason::none ? nlohmann::json(nullptr) : nlohmann::json(to_string(p.reason))}};
}

FineTuneResult fine_tune(const Model& model, const Dataset& train, const Dataset& test, const FineTuneConfig& config,
                         const ProgressCallback& progress, std::stop_token stop) {
  return run(model, train, test, config, config.max_epochs, true, progress, std::move(stop));
}

FineTuneResult train_epochs(const Model& model, const Dataset& train, const Dataset& test, int epochs,
                            const FineTuneConfig& config, const ProgressCallback& progress, std::stop_token stop) {
  return run(model, train, test, config, epochs, false, progress, std::move(stop));
}

}  // namespace cnnp
