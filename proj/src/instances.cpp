#include "cnnp/instances.hpp"

#include <cmath>

#include <spdlog/spdlog.h>

#include "cnnp/rng.hpp"

namespace cnnp {
namespace {

Embedding2D grid_layout(std::size_t n) {
  Embedding2D e;
  e.method = "grid";
  const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(std::max<std::size_t>(n, 1)))));
  for (std::size_t i = 0; i < n; ++i) {
    e.x.push_back(static_cast<double>(i % cols));
    e.y.push_back(static_cast<double>(i / cols));
  }
  return e;
}

/// Row i of the conditional affinities for a target perplexity (binary search on the precision).
void conditional_row(const Eigen::MatrixXd& d2, Index i, double log_perp, Eigen::MatrixXd& p) {
  const Index n = d2.rows();
  double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
  for (int it = 0; it < 200; ++it) {
    double sum = 0.0, dsum = 0.0;
    for (Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const double v = std::exp(-d2(i, j) * beta);
      p(i, j) = v;
      sum += v;
      dsum += d2(i, j) * v;
    }
    if (sum <= 0.0) {
      // Precision too high for every neighbour; back off.
      hi = beta;
      beta = (lo + hi) / 2;
      continue;
    }
    const double entropy = std::log(sum) + beta * dsum / sum;
    const double diff = entropy - log_perp;
    for (Index j = 0; j < n; ++j) {
      if (j != i) p(i, j) /= sum;
    }
    if (std::abs(diff) < 1e-5) break;
    if (diff > 0) {
      lo = beta;
      beta = std::isinf(hi) ? beta * 2 : (beta + hi) / 2;
    } else {
      hi = beta;
      beta = (beta + lo) / 2;
    }
  }
  p(i, i) = 0.0;
}

}  // namespace

ConfusionMatrix confusion_from_counts(std::vector<std::vector<std::int64_t>> counts) {
  ConfusionMatrix m;
  m.percent.resize(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i].size() != counts.size()) throw Error(ErrorCode::shape_mismatch, "confusion matrix must be square");
    std::int64_t total = 0;
    for (auto c : counts[i]) total += c;
    m.percent[i].assign(counts.size(), 0.0);
    for (std::size_t j = 0; j < counts.size(); ++j) {
      if (total > 0) m.percent[i][j] = 100.0 * static_cast<double>(counts[i][j]) / static_cast<double>(total);
    }
  }
  m.counts = std::move(counts);
  return m;
}

ConfusionMatrix confusion_from_predictions(std::span<const int> labels, std::span<const int> predictions,
                                           Index num_classes) {
  if (labels.size() != predictions.size()) throw Error(ErrorCode::shape_mismatch, "label and prediction counts differ");
  const auto c = static_cast<std::size_t>(num_classes);
  std::vector<std::vector<std::int64_t>> counts(c, std::vector<std::int64_t>(c, 0));
  for (std::size_t k = 0; k < labels.size(); ++k) {
    if (labels[k] < 0 || static_cast<std::size_t>(labels[k]) >= c || predictions[k] < 0 ||
        static_cast<std::size_t>(predictions[k]) >= c) {
      throw Error(ErrorCode::label_out_of_range, "class index outside the confusion matrix");
    }
    ++counts[static_cast<std::size_t>(labels[k])][static_cast<std::size_t>(predictions[k])];
  }
  return confusion_from_counts(std::move(counts));
}

ConfusionMatrix confusion_matrix(const Model& model, const Dataset& test) {
  const auto preds = predict_dataset(model, test);
  return confusion_from_predictions(test.labels, preds, std::max(test.num_classes(), model.architecture().num_classes()));
}

nlohmann::json to_json(const ConfusionMatrix& m) { return {{"counts", m.counts}, {"percent", m.percent}}; }

InstanceDiff diff_predictions(std::span<const std::string> ids, std::span<const int> labels, std::span<const int> parent,
                              std::span<const int> child) {
  if (labels.size() != parent.size() || labels.size() != child.size() || labels.size() != ids.size()) {
    throw Error(ErrorCode::shape_mismatch, "diff inputs have different lengths");
  }
  InstanceDiff d;
  for (std::size_t k = 0; k < labels.size(); ++k) {
    const bool p = parent[k] == labels[k], c = child[k] == labels[k];
    d.parent_correct += p;
    d.child_correct += c;
    if (p == c) continue;
    DiffEntry e{ids[k], labels[k], parent[k], child[k]};
    (p ? d.degenerated : d.improved).push_back(std::move(e));
  }
  return d;
}

InstanceDiff diff_instances(const Model& parent, const Model& child, const Dataset& test) {
  if (parent.architecture().class_names != child.architecture().class_names) {
    throw Error(ErrorCode::invalid_argument, "models have different class spaces");
  }
  const auto pp = predict_dataset(parent, test);
  const auto cp = predict_dataset(child, test);
  return diff_predictions(test.ids, test.labels, pp, cp);
}

nlohmann::json to_json(const InstanceDiff& d) {
  auto list = [](const std::vector<DiffEntry>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& e : v) {
      a.push_back({{"id", e.id}, {"label", e.label}, {"parent", e.parent_prediction}, {"child", e.child_prediction}});
    }
    return a;
  };
  return {{"degenerated", list(d.degenerated)},
          {"improved", list(d.improved)},
          {"parent_correct", d.parent_correct},
          {"child_correct", d.child_correct}};
}

nlohmann::json to_json(const Embedding2D& e) {
  nlohmann::json pts = nlohmann::json::array();
  for (std::size_t i = 0; i < e.x.size(); ++i) {
    pts.push_back({{"id", i < e.ids.size() ? e.ids[i] : std::string()}, {"x", e.x[i]}, {"y", e.y[i]}});
  }
  return {{"method", e.method},
          {"seed", e.seed},
          {"perplexity", e.perplexity},
          {"iterations", e.iterations},
          {"points", pts}};
}

Embedding2D tsne(const Eigen::MatrixXd& points, std::uint64_t seed, const TsneOptions& opt) {
  const Index n = points.rows();
  bool identical = true;
  for (Index i = 1; i < n && identical; ++i) identical = points.row(i) == points.row(0);
  if (n < 3 || identical) {
    if (n >= 3) spdlog::warn("t-SNE: all {} inputs are identical, using a grid layout", n);
    Embedding2D e = grid_layout(static_cast<std::size_t>(n));
    e.seed = seed;
    return e;
  }

  const double perplexity = std::max(1.0, std::min(opt.perplexity, static_cast<double>(n - 1) / 3.0));
  if (perplexity != opt.perplexity) spdlog::debug("t-SNE: perplexity {} reduced to {} for {} points", opt.perplexity, perplexity, n);

  const Eigen::VectorXd sq = points.rowwise().squaredNorm();
  Eigen::MatrixXd d2 = (-2.0 * points * points.transpose()).colwise() + sq;
  d2.rowwise() += sq.transpose();
  d2 = d2.cwiseMax(0.0);

  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(n, n);
  for (Index i = 0; i < n; ++i) conditional_row(d2, i, std::log(perplexity), p);
  p = (p + p.transpose()) / (2.0 * static_cast<double>(n));
  p = p.cwiseMax(1e-12);
  p.diagonal().setZero();

  Rng rng(seed);
  Eigen::MatrixXd y(n, 2);
  for (Index i = 0; i < n; ++i)
    for (Index k = 0; k < 2; ++k) y(i, k) = 1e-4 * rng.normal();
  Eigen::MatrixXd update = Eigen::MatrixXd::Zero(n, 2), gains = Eigen::MatrixXd::Ones(n, 2);
  Eigen::MatrixXd num(n, n), grad(n, 2);

  for (int it = 0; it < opt.iterations; ++it) {
    const double exaggeration = it < opt.exaggeration_iterations ? opt.early_exaggeration : 1.0;
    const double momentum = it < opt.exaggeration_iterations ? 0.5 : 0.8;
    const Eigen::VectorXd ysq = y.rowwise().squaredNorm();
    num = (-2.0 * y * y.transpose()).colwise() + ysq;
    num.rowwise() += ysq.transpose();
    num = (num.array() + 1.0).inverse().matrix();
    num.diagonal().setZero();
    const double qsum = std::max(num.sum(), 1e-300);
    // grad_i = 4 sum_j (p_ij - q_ij) num_ij (y_i - y_j)
    const Eigen::MatrixXd w = ((exaggeration * p).array() - num.array() / qsum).matrix().cwiseProduct(num);
    grad = 4.0 * (w.rowwise().sum().asDiagonal() * y - w * y);
    for (Index i = 0; i < n; ++i)
      for (Index k = 0; k < 2; ++k) {
        const bool same = (grad(i, k) > 0) == (update(i, k) > 0);
        gains(i, k) = std::max(same ? gains(i, k) * 0.8 : gains(i, k) + 0.2, 0.01);
      }
    update = momentum * update - opt.learning_rate * gains.cwiseProduct(grad);
    y += update;
    y.rowwise() -= y.colwise().mean();
  }

  Embedding2D e;
  e.method = "tsne";
  e.seed = seed;
  e.perplexity = perplexity;
  e.iterations = opt.iterations;
  e.x.resize(static_cast<std::size_t>(n));
  e.y.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    e.x[static_cast<std::size_t>(i)] = y(i, 0);
    e.y[static_cast<std::size_t>(i)] = y(i, 1);
  }
  return e;
}

Eigen::VectorXd downsample_instance(const Dataset& data, std::size_t index, Index max_side) {
  const Index c = data.images.dim(1), h = data.images.dim(2), w = data.images.dim(3);
  const Index f = std::max<Index>(1, (std::max(h, w) + max_side - 1) / max_side);
  const Index oh = (h + f - 1) / f, ow = (w + f - 1) / f;
  Eigen::VectorXd out = Eigen::VectorXd::Zero(oh * ow);
  const auto n = static_cast<Index>(index);
  for (Index r = 0; r < oh; ++r)
    for (Index q = 0; q < ow; ++q) {
      double sum = 0.0;
      Index count = 0;
      for (Index y = r * f; y < std::min(h, (r + 1) * f); ++y)
        for (Index x = q * f; x < std::min(w, (q + 1) * f); ++x) {
          for (Index ch = 0; ch < c; ++ch) sum += data.images.at(n, ch, y, x);
          count += c;
        }
      out[r * ow + q] = sum / static_cast<double>(count);
    }
  return out;
}

Embedding2D embed_instances(const InstanceDiff& diff, const Dataset& test, std::uint64_t seed, const TsneOptions& options) {
  std::vector<std::string> ids;
  for (const auto& e : diff.degenerated) ids.push_back(e.id);
  for (const auto& e : diff.improved) ids.push_back(e.id);
  Eigen::MatrixXd pts;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const Eigen::VectorXd v = downsample_instance(test, test.index_of(ids[i]));
    if (i == 0) pts.resize(static_cast<Index>(ids.size()), v.size());
    pts.row(static_cast<Index>(i)) = v.transpose();
  }
  Embedding2D e = tsne(pts, seed, options);
  e.ids = std::move(ids);
  return e;
}

}  // namespace cnnp
