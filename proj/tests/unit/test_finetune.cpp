#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "cnnp/finetune.hpp"
#include "support.hpp"

using namespace cnnp;
using namespace cnnp::testing;

namespace {

Architecture halves_arch() { return toy_architecture(4, 6, 6, 2); }

FineTuneConfig quick() {
  FineTuneConfig c;
  c.target_accuracy = 1.0;
  c.max_epochs = 40;
  c.learning_rate = 0.01;
  c.batch_size = 8;
  c.seed = 3;
  return c;
}

}  // namespace

TEST_CASE("fine_tune") {
  const Dataset train = halves_dataset(64, 1), test = halves_dataset(32, 2);
  const Model start = build_model(halves_arch(), 1);

  SUBCASE("zero epochs returns the input") {
    FineTuneConfig c = quick();
    c.max_epochs = 0;
    const auto r = fine_tune(start, train, test, c);
    CHECK(bit_identical(r.model, start));
    CHECK(r.trace.epochs_used == 0);
    CHECK_FALSE(r.trace.converged);
    CHECK(r.trace.epoch_loss.empty());
  }
  SUBCASE("separable task reaches the target") {
    const auto r = fine_tune(start, train, test, quick());
    CHECK(r.trace.reason == TerminationReason::target_accuracy);
    CHECK(r.trace.converged);
    CHECK(r.trace.epoch_accuracy.back() >= 1.0);
    CHECK(evaluate(r.model, test).accuracy == 1.0);
    CHECK(r.trace.epoch_loss.size() == static_cast<std::size_t>(r.trace.epochs_used));
    CHECK(r.trace.batch_loss.size() == static_cast<std::size_t>(r.trace.epochs_used) * 8);
  }
  SUBCASE("hitting the epoch cap is not convergence") {
    FineTuneConfig c = quick();
    c.max_epochs = 1;
    c.learning_rate = 1e-6;
    const auto r = fine_tune(start, train, test, c);
    CHECK(r.trace.reason == TerminationReason::max_epochs);
    CHECK_FALSE(r.trace.converged);
    CHECK(r.trace.epochs_used == 1);
  }
  SUBCASE("reproducible and leaves the source alone") {
    const Model before = start;
    const auto a = fine_tune(start, train, test, quick());
    const auto b = fine_tune(start, train, test, quick());
    CHECK(bit_identical(start, before));
    CHECK(bit_identical(a.model, b.model));
    CHECK(a.trace.batch_loss == b.trace.batch_loss);
    FineTuneConfig other = quick();
    other.seed = 4;
    CHECK(fine_tune(start, train, test, other).trace.batch_loss != a.trace.batch_loss);
  }
  SUBCASE("progress snapshots") {
    std::vector<FineTuneProgress> seen;
    const auto r = fine_tune(start, train, test, quick(), [&](const FineTuneProgress& p) { seen.push_back(p); });
    REQUIRE(seen.size() == static_cast<std::size_t>(r.trace.epochs_used));
    CHECK(seen.back().done);
    CHECK(seen.back().reason == TerminationReason::target_accuracy);
    for (std::size_t i = 0; i + 1 < seen.size(); ++i) {
      CHECK_FALSE(seen[i].done);
      CHECK(seen[i].epoch == static_cast<int>(i) + 1);
      CHECK(seen[i].mean_loss == r.trace.epoch_loss[i]);
    }
    const auto j = to_json(seen.back());
    for (const char* k : {"epoch", "mean_loss", "test_accuracy", "done", "reason"}) CHECK(j.contains(k));
    CHECK(j["reason"] == "target_accuracy");
  }
  SUBCASE("cancellation returns the untouched source") {
    std::stop_source src;
    int calls = 0;
    const auto r = fine_tune(
        start, train, test, quick(),
        [&](const FineTuneProgress&) {
          if (++calls == 1) src.request_stop();
        },
        src.get_token());
    CHECK(r.trace.reason == TerminationReason::cancelled);
    CHECK(r.trace.epochs_used == 1);
    CHECK(bit_identical(r.model, start));
  }
  SUBCASE("train_epochs ignores early termination") {
    const auto r = train_epochs(start, train, test, 3, quick());
    CHECK(r.trace.epochs_used == 3);
    CHECK(r.trace.reason == TerminationReason::max_epochs);
  }
}

TEST_CASE("fine_tune properties over random configs") {
  const Dataset train = halves_dataset(32, 7), test = halves_dataset(16, 8);
  Rng rng(9);
  for (int t = 0; t < 8; ++t) {
    CAPTURE(t);
    FineTuneConfig c;
    c.max_epochs = static_cast<int>(rng.below(5));
    c.target_accuracy = 0.5 + 0.5 * rng.uniform();
    c.delta_loss = rng.uniform() * 1e-2;
    c.learning_rate = 0.001 + 0.02 * rng.uniform();
    c.batch_size = 4 + static_cast<Index>(rng.below(8));
    c.seed = rng.below(1000);
    const auto r = fine_tune(build_model(halves_arch(), t), train, test, c);
    CHECK(r.trace.epochs_used <= c.max_epochs);
    if (r.trace.reason == TerminationReason::target_accuracy) CHECK(r.trace.epoch_accuracy.back() >= c.target_accuracy);
    CHECK(r.trace.epoch_accuracy.size() == static_cast<std::size_t>(r.trace.epochs_used));
  }
}

TEST_CASE("should_terminate") {
  FineTuneConfig c;
  FineTuneTrace t;
  CHECK(should_terminate(t, c) == TerminationReason::none);
  t.epoch_accuracy = {0.99};
  t.epoch_loss = {0.3};
  t.epochs_used = 1;
  CHECK(should_terminate(t, c) == TerminationReason::target_accuracy);

  t.epoch_accuracy = {0.5, 0.5};
  t.epoch_loss = {0.5, 0.4999995};
  t.epochs_used = 2;
  CHECK(should_terminate(t, c) == TerminationReason::delta_loss);
  t.epoch_loss = {0.5, 0.49};
  CHECK(should_terminate(t, c) == TerminationReason::none);

  t.epoch_loss = {0.5};
  t.epoch_accuracy = {0.5};
  t.epochs_used = 1;
  c.delta_loss = 1.0;
  CHECK(should_terminate(t, c) == TerminationReason::none);  // delta needs two epochs

  t.epochs_used = 30;
  c.max_epochs = 30;
  CHECK(should_terminate(t, c) == TerminationReason::max_epochs);

  // target accuracy takes precedence over the other two.
  t.epoch_accuracy = {0.5, 0.99};
  t.epoch_loss = {0.5, 0.5};
  CHECK(should_terminate(t, c) == TerminationReason::target_accuracy);
}

TEST_CASE("trace_statistics") {
  FineTuneTrace t;
  CHECK(trace_statistics(t).empty);
  t.epoch_accuracy = {0.80, 0.90, 0.93};
  t.batch_loss = {1.0, 0.5};
  t.epochs_used = 3;
  auto s = trace_statistics(t);
  CHECK(s.min_accuracy == 0.80);
  CHECK(s.max_accuracy == 0.93);
  CHECK(s.final_accuracy == 0.93);
  CHECK(s.recovery_cost == 3);
  CHECK(s.loss_curve == t.batch_loss);
  t.epoch_accuracy = {0.7};
  t.epochs_used = 1;
  s = trace_statistics(t);
  CHECK(s.min_accuracy == s.max_accuracy);
  CHECK(s.final_accuracy == 0.7);
}

TEST_CASE("config and trace json") {
  const auto c = finetune_config_from_json(nlohmann::json::parse(R"({"max_epochs": 3, "optimizer": "sgd", "lr": 0.5})"));
  CHECK(c.max_epochs == 3);
  CHECK(c.optimizer == OptimizerKind::sgd);
  CHECK(c.learning_rate == 0.5);
  CHECK(c.target_accuracy == 0.985);
  CHECK(c.delta_loss == 1e-6);
  CHECK(c.batch_size == 100);
  CHECK_THROWS_AS(finetune_config_from_json(nlohmann::json::parse(R"({"max_epochs": -1})")), Error);
  CHECK_THROWS_AS(finetune_config_from_json(nlohmann::json::parse(R"({"target_accuracy": 1.5})")), Error);
  CHECK_THROWS_AS(finetune_config_from_json(nlohmann::json::parse(R"({"optimizer": "rmsprop"})")), Error);

  FineTuneTrace t;
  t.epoch_loss = {0.4, 0.3};
  t.batch_loss = {0.5, 0.4, 0.3};
  t.epoch_accuracy = {0.9, 0.95};
  t.epochs_used = 2;
  t.converged = true;
  t.reason = TerminationReason::delta_loss;
  const auto back = trace_from_json(nlohmann::json::parse(to_json(t).dump()));
  CHECK(back.epoch_loss == t.epoch_loss);
  CHECK(back.reason == t.reason);
  CHECK(back.converged);
}
