#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cnnp/datasets.hpp"
#include "cnnp/model.hpp"

namespace cnnp {

struct ConfusionMatrix {
  std::vector<std::vector<std::int64_t>> counts;  // [true][predicted]
  std::vector<std::vector<double>> percent;       // row-normalized, 0..100

  Index size() const { return static_cast<Index>(counts.size()); }
};

ConfusionMatrix confusion_from_counts(std::vector<std::vector<std::int64_t>> counts);
ConfusionMatrix confusion_from_predictions(std::span<const int> labels, std::span<const int> predictions,
                                           Index num_classes);
ConfusionMatrix confusion_matrix(const Model& model, const Dataset& test);

nlohmann::json to_json(const ConfusionMatrix& m);

struct DiffEntry {
  std::string id;
  int label = 0;
  int parent_prediction = 0;
  int child_prediction = 0;
};

/// Test instances whose correctness flips between two models.
struct InstanceDiff {
  std::vector<DiffEntry> degenerated;  // right in the parent, wrong in the child
  std::vector<DiffEntry> improved;     // wrong in the parent, right in the child
  std::int64_t parent_correct = 0;
  std::int64_t child_correct = 0;
};

InstanceDiff diff_predictions(std::span<const std::string> ids, std::span<const int> labels,
                              std::span<const int> parent, std::span<const int> child);
/// Models must share the class space of `test`.
InstanceDiff diff_instances(const Model& parent, const Model& child, const Dataset& test);

nlohmann::json to_json(const InstanceDiff& d);

struct Embedding2D {
  std::vector<std::string> ids;
  std::vector<double> x;
  std::vector<double> y;
  std::string method;  // "tsne" or "grid"
  std::uint64_t seed = 0;
  double perplexity = 0.0;
  int iterations = 0;
};

nlohmann::json to_json(const Embedding2D& e);

struct TsneOptions {
  double perplexity = 15.0;
  int iterations = 1000;
  double learning_rate = 200.0;
  double early_exaggeration = 12.0;
  int exaggeration_iterations = 250;
};

/// Exact t-SNE of the rows of `points` (N x D). Falls back to a grid layout
/// for fewer than three points or when all rows are identical.
Embedding2D tsne(const Eigen::MatrixXd& points, std::uint64_t seed, const TsneOptions& options = {});

/// Grayscale, box-averaged down to at most `max_side` per side, flattened.
Eigen::VectorXd downsample_instance(const Dataset& data, std::size_t index, Index max_side = 16);

/// Embeds the diff's degenerated then improved instances.
Embedding2D embed_instances(const InstanceDiff& diff, const Dataset& test, std::uint64_t seed,
                            const TsneOptions& options = {});

}  // namespace cnnp
