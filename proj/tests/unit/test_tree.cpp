#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <fstream>

#include "cnnp/checkpoint.hpp"
#include "cnnp/tree.hpp"
#include "support.hpp"

using namespace cnnp;
using namespace cnnp::testing;

namespace {

std::shared_ptr<const DatasetPair> halves_pair() {
  return std::make_shared<const DatasetPair>(DatasetPair{halves_dataset(64, 1), halves_dataset(32, 2)});
}

SessionDefaults small_defaults() {
  SessionDefaults d;
  d.sensitivity.runs = 2;
  d.sensitivity.options.num_batches = 2;
  d.sensitivity.options.batch_size = 8;
  d.finetune = FineTuneConfig{};
  d.finetune.max_epochs = 2;
  d.finetune.target_accuracy = 0.0;
  d.finetune.learning_rate = 0.01;
  d.finetune.batch_size = 8;
  return d;
}

std::shared_ptr<Session> halves_session(Index a = 4, Index b = 6) {
  return Session::create(build_model(toy_architecture(a, b, 6, 2), 1), halves_pair(), small_defaults());
}

PruningPlan plan_of(std::vector<FilterRef> filters) {
  PruningPlan p;
  p.filters = std::move(filters);
  std::sort(p.filters.begin(), p.filters.end());
  return p;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / name) {
    std::filesystem::remove_all(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

NodeMeta meta(NodeId id, Index filters, double accuracy) {
  NodeMeta m;
  m.id = id;
  m.filter_count = filters;
  m.accuracy = accuracy;
  return m;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error raised");
  return ErrorCode::io;
}

}  // namespace

TEST_CASE("root node metadata") {
  auto s = halves_session();
  const auto root = s->node(0);
  CHECK(s->root_id() == 0);
  CHECK(root.filter_count == 10);
  CHECK(root.layer_filters == std::vector<Index>{4, 6});
  CHECK(root.compression_ratio == 0.0);
  CHECK_FALSE(root.parent);
  CHECK_FALSE(root.plan);
  CHECK_FALSE(root.trace);
  CHECK(root.params == count_params(*s->model(0)));
  CHECK(root.storage_bytes == encode_checkpoint(*s->model(0)).size());
  CHECK(root.confusion.size() == 2);
  CHECK(root.correct == evaluate(*s->model(0), s->data().test).correct);
  CHECK(to_json(halves_session()->node(0)) == to_json(root));
}

TEST_CASE("session creation checks the class space") {
  auto data = halves_pair();
  CHECK(code_of([&] { Session::create(build_model(toy_architecture(4, 6, 6, 3), 1), data); }) ==
        ErrorCode::invalid_argument);
  CHECK(code_of([&] { Session::create(build_model(toy_architecture(4, 6, 8, 2), 1), data); }) ==
        ErrorCode::shape_mismatch);
}

TEST_CASE("prune_node rejects bad plans before any compute") {
  auto s = halves_session();
  const auto cfg = s->defaults().finetune;
  CHECK(code_of([&] { s->prune_node(0, PruningPlan{}, cfg); }) == ErrorCode::invalid_plan);
  CHECK(code_of([&] { s->prune_node(0, plan_of({{0, 0}, {0, 1}, {0, 2}, {0, 3}}), cfg); }) == ErrorCode::invalid_plan);
  CHECK(code_of([&] { s->prune_node(0, plan_of({{0, 9}}), cfg); }) == ErrorCode::invalid_plan);
  CHECK(code_of([&] { s->prune_node(5, plan_of({{0, 1}}), cfg); }) == ErrorCode::not_found);
  CHECK(s->nodes().size() == 1);
}

TEST_CASE("branching: two plans on one node give two children") {
  auto s = halves_session();
  const auto cfg = s->defaults().finetune;
  const std::string before = encode_checkpoint(*s->model(0));
  const NodeId a = s->prune_node(0, plan_of({{0, 1}}), cfg);
  const NodeId b = s->prune_node(0, plan_of({{2, 0}, {2, 5}}), cfg);
  CHECK(a == 1);
  CHECK(b == 2);
  CHECK(s->node(0).children == std::vector<NodeId>{1, 2});
  CHECK(s->node(a).parent == 0);
  CHECK(s->node(b).parent == 0);
  CHECK(s->node(a).filter_count == 9);
  CHECK(s->node(b).layer_filters == std::vector<Index>{4, 4});
  CHECK(s->node(b).plan->node_id == 0);
  CHECK(s->node(b).trace->epochs_used >= 1);
  CHECK(encode_checkpoint(*s->model(0)) == before);
  CHECK(s->path_to(b) == std::vector<NodeId>{0, 2});
}

TEST_CASE("chain invariants: ids, filter counts and compression") {
  auto s = halves_session();
  const auto cfg = s->defaults().finetune;
  NodeId cur = 0;
  for (int i = 0; i < 3; ++i) {
    const auto prof = s->profile(cur);
    cur = s->prune_node(cur, plan_from_threshold(*prof, 2, PlanOrigin::threshold), cfg);
  }
  const auto path = s->path_to(cur);
  REQUIRE(path.size() == 4);
  for (std::size_t k = 1; k < path.size(); ++k) {
    const auto p = s->node(path[k - 1]), c = s->node(path[k]);
    CHECK(c.id > p.id);
    CHECK(c.filter_count < p.filter_count);
    CHECK(c.compression_ratio > p.compression_ratio);
    CHECK(c.compression_ratio < 1.0);
    CHECK(c.compression_ratio == doctest::Approx(1.0 - double(c.params) / double(s->node(0).params)));
  }
}

TEST_CASE("profiles are cached per node") {
  auto s = halves_session();
  CHECK_FALSE(s->has_profile(0));
  const auto p = s->profile(0);
  CHECK(s->has_profile(0));
  CHECK(s->profile(0) == p);
  CHECK(p->runs.size() == 2);
  CHECK(p->size() == 10);
}

TEST_CASE("cancelled fine-tune adds no node") {
  auto s = halves_session();
  std::stop_source src;
  src.request_stop();
  CHECK(code_of([&] { s->prune_node(0, plan_of({{0, 1}}), s->defaults().finetune, {}, src.get_token()); }) ==
        ErrorCode::cancelled);
  CHECK(s->nodes().size() == 1);
}

TEST_CASE("estimator fixtures") {
  const auto a = meta(3, 201, 0.928), b = meta(4, 132, 0.920);
  CHECK(*estimate(a, b, {0.925, {}}).filters == 175);
  CHECK(*estimate(b, a, {0.925, {}}).filters == 175);
  CHECK(*estimate(a, b, {0.928, {}}).filters == 201);
  CHECK(*estimate(a, b, {0.920, {}}).filters == 132);
  CHECK(*estimate(a, b, {{}, 166.5}).accuracy == doctest::Approx(0.924));
  CHECK(*estimate(a, b, {{}, 201.0}).accuracy == doctest::Approx(0.928));
  CHECK(code_of([&] { estimate(a, meta(5, 90, 0.928), {0.93, {}}); }) == ErrorCode::non_informative_pair);
  CHECK(code_of([&] { estimate(a, meta(5, 201, 0.9), {{}, 100.0}); }) == ErrorCode::non_informative_pair);
  CHECK(code_of([&] { estimate(a, a, {0.9, {}}); }) == ErrorCode::invalid_argument);
  CHECK(code_of([&] { estimate(a, b, {}); }) == ErrorCode::invalid_argument);
}

TEST_CASE("estimator is exact on collinear fixtures and symmetric") {
  Rng rng(17);
  for (int t = 0; t < 200; ++t) {
    // accuracy = 0.5 + k * filters with filters integral
    const double k = rng.uniform(1e-4, 2e-3);
    const Index f1 = 10 + static_cast<Index>(rng.below(200)), f2 = f1 + 1 + static_cast<Index>(rng.below(100));
    const Index f3 = static_cast<Index>(rng.below(400));
    const auto a = meta(1, f1, 0.5 + k * double(f1)), b = meta(2, f2, 0.5 + k * double(f2));
    const auto fwd = estimate(a, b, {0.5 + k * double(f3), {}});
    CHECK(*fwd.filters == f3);
    CHECK(*estimate(b, a, {0.5 + k * double(f3), {}}).filters == f3);
    const double acc = *estimate(a, b, {{}, double(f3)}).accuracy;
    CHECK(acc == doctest::Approx(0.5 + k * double(f3)).epsilon(1e-12));
    CHECK(acc == *estimate(b, a, {{}, double(f3)}).accuracy);
  }
}

TEST_CASE("save and load round-trip a seven-node session") {
  TempDir dir("cnnp_tree_roundtrip");
  auto s = halves_session();
  const auto cfg = s->defaults().finetune;
  s->save(dir.path);
  const NodeId n1 = s->prune_node(0, plan_of({{0, 0}}), cfg);
  const NodeId n2 = s->prune_node(n1, plan_of({{2, 1}, {2, 2}}), cfg);
  const NodeId n3 = s->prune_node(n2, plan_of({{0, 2}}), cfg);
  s->prune_node(n1, plan_of({{2, 0}}), cfg);
  const NodeId n5 = s->prune_node(0, plan_of({{2, 3}, {0, 3}}), cfg);
  s->prune_node(n5, plan_of({{2, 4}}), cfg);
  s->profile(n3);
  REQUIRE(s->nodes().size() == 7);
  CHECK(std::filesystem::exists(dir.path / "manifest.json"));
  CHECK(std::filesystem::exists(dir.path / "node_6.cnpm"));
  CHECK(std::filesystem::exists(dir.path / "profile_3.json"));

  auto r = Session::load(dir.path, s->data_ptr());
  CHECK(r->manifest() == s->manifest());
  for (const auto& m : s->nodes()) {
    CHECK(r->path_to(m.id) == s->path_to(m.id));
    CHECK(encode_checkpoint(*r->model(m.id)) == encode_checkpoint(*s->model(m.id)));
  }
  CHECK(r->has_profile(n3));
  CHECK(to_json(*r->profile(n3)) == to_json(*s->profile(n3)));

  const NodeId next = r->prune_node(n3, plan_of({{2, 3}}), cfg);
  CHECK(next == 7);
  CHECK(Session::load(dir.path, s->data_ptr())->nodes().size() == 8);
}

TEST_CASE("saving an in-memory session later writes every node") {
  TempDir dir("cnnp_tree_late_save");
  auto s = halves_session();
  const NodeId c = s->prune_node(0, plan_of({{0, 0}}), s->defaults().finetune);
  s->profile(0);
  s->save(dir.path);
  CHECK(std::filesystem::exists(dir.path / "node_0.cnpm"));
  CHECK(std::filesystem::exists(dir.path / "node_1.cnpm"));
  CHECK(std::filesystem::exists(dir.path / "profile_0.json"));
  auto r = Session::load(dir.path, s->data_ptr());
  CHECK(encode_checkpoint(*r->model(c)) == encode_checkpoint(*s->model(c)));
}

TEST_CASE("load errors") {
  TempDir dir("cnnp_tree_errors");
  auto s = halves_session();
  s->save(dir.path);
  s->prune_node(0, plan_of({{0, 0}}), s->defaults().finetune);
  std::filesystem::remove(dir.path / "node_1.cnpm");
  try {
    Session::load(dir.path, s->data_ptr());
    FAIL("missing checkpoint accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::not_found);
    CHECK(std::string(e.what()).find("node 1") != std::string::npos);
  }
  std::ofstream(dir.path / "manifest.json") << "{\"format\": \"cnnp-session\", \"version\": 1, \"nod";
  CHECK(code_of([&] { Session::load(dir.path, s->data_ptr()); }) == ErrorCode::invalid_argument);
  std::ofstream(dir.path / "manifest.json") << "{\"format\": \"cnnp-session\", \"version\": 1}";
  CHECK(code_of([&] { Session::load(dir.path, s->data_ptr()); }) == ErrorCode::invalid_argument);
  std::ofstream(dir.path / "manifest.json") << "{\"format\": \"cnnp-session\", \"version\": 9}";
  CHECK(code_of([&] { Session::load(dir.path, s->data_ptr()); }) == ErrorCode::version_mismatch);
  CHECK(code_of([&] { Session::load(dir.path / "nowhere", s->data_ptr()); }) == ErrorCode::io);
}

TEST_CASE("confusion cell history follows the root path") {
  auto s = halves_session();
  CHECK(s->confusion_cell_history(0, 0, 0).size() == 1);
  const NodeId a = s->prune_node(0, plan_of({{0, 0}}), s->defaults().finetune);
  const NodeId b = s->prune_node(a, plan_of({{2, 0}}), s->defaults().finetune);
  const auto h = s->confusion_cell_history(b, 1, 0);
  REQUIRE(h.size() == 3);
  const std::vector<NodeId> path = {0, a, b};
  for (std::size_t k = 0; k < 3; ++k) CHECK(h[k] == confusion_from_counts(s->node(path[k]).confusion).percent[1][0]);
  CHECK(code_of([&] { s->confusion_cell_history(b, 2, 0); }) == ErrorCode::invalid_argument);
}

TEST_CASE("auto_prune with stop accuracy 0 runs until no filter can go") {
  auto s = halves_session();
  std::vector<NodeId> seen;
  const auto ids = s->auto_prune(0, 1.0 / 3.0, 0.0, s->defaults().finetune, {}, {}, [&](NodeId id) { seen.push_back(id); });
  CHECK(ids == seen);
  REQUIRE_FALSE(ids.empty());
  const auto last = s->node(ids.back());
  const Index count = std::min<Index>(std::llround(last.filter_count / 3.0), last.filter_count - 1);
  CHECK(plan_from_threshold(*s->profile(last.id), count, PlanOrigin::auto_ratio).filters.empty());
  for (std::size_t k = 1; k < ids.size(); ++k) CHECK(s->node(ids[k]).parent == ids[k - 1]);
  CHECK(code_of([&] { s->auto_prune(0, 1.0, 0.0, s->defaults().finetune); }) == ErrorCode::invalid_argument);
  CHECK(code_of([&] { s->auto_prune(0, 0.0, 0.0, s->defaults().finetune); }) == ErrorCode::invalid_argument);
}

TEST_CASE("auto_prune at ratio 1/2 needs at most ceil(log2 F) iterations") {
  for (Index a : {4, 8}) {
    auto s = halves_session(a, 8);
    const auto f = s->node(0).filter_count;
    const auto ids = s->auto_prune(0, 0.5, 0.0, s->defaults().finetune);
    CHECK(static_cast<double>(ids.size()) <= std::ceil(std::log2(static_cast<double>(f))));
  }
}

TEST_CASE("auto_prune stops at the first child below the stop accuracy and keeps it") {
  for (double stop : {0.6, 0.9, 1.0}) {
    auto s = halves_session();
    const auto ids = s->auto_prune(0, 1.0 / 3.0, stop, s->defaults().finetune);
    REQUIRE_FALSE(ids.empty());
    for (std::size_t k = 0; k + 1 < ids.size(); ++k) CHECK(s->node(ids[k]).accuracy >= stop);
    const auto last = s->node(ids.back());
    if (last.accuracy >= stop) {
      const auto prof = s->profile(last.id);
      const Index count = std::min<Index>(std::llround(last.filter_count / 3.0), last.filter_count - 1);
      CHECK(plan_from_threshold(*prof, count, PlanOrigin::auto_ratio).filters.empty());
    }
  }
}

TEST_CASE("auto_prune stops on a non-converged child") {
  auto s = halves_session();
  auto cfg = s->defaults().finetune;
  cfg.target_accuracy = 1.0;
  cfg.delta_loss = 0.0;
  cfg.max_epochs = 1;
  const auto ids = s->auto_prune(0, 1.0 / 3.0, 0.0, cfg);
  REQUIRE(ids.size() == 1);
  CHECK_FALSE(s->node(ids[0]).converged);
}

TEST_CASE("node metadata JSON round-trip") {
  auto s = halves_session();
  const NodeId c = s->prune_node(0, plan_of({{0, 0}}), s->defaults().finetune);
  for (const auto& m : s->nodes()) CHECK(to_json(node_from_json(to_json(m))) == to_json(m));
  CHECK(to_json(session_defaults_from_json(to_json(s->defaults()))) == to_json(s->defaults()));
  CHECK(s->node(c).plan->filters == std::vector<FilterRef>{{0, 0}});
  CHECK_THROWS_AS(node_from_json({{"id", 1}}), Error);
}
