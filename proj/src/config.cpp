#include "cnnp/config.hpp"

#include <fstream>
#include <set>

namespace cnnp {
namespace {

[[noreturn]] void config_error(const std::string& key, const std::string& what) {
  throw Error(ErrorCode::invalid_argument, "config: " + key + ": " + what, key);
}

void reject_unknown(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) config_error(where.empty() ? "<root>" : where, "expected an object");
  const std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) config_error(where.empty() ? k : where + "." + k, "unknown key");
  }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, const std::string& where, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    config_error(where.empty() ? key : where + "." + key, "wrong type");
  }
}

Dataset limit(Dataset d, Index n) { return n > 0 ? head(d, n) : d; }

}  // namespace

nlohmann::json to_json(const DatasetSpec& s) {
  return {{"kind", s.kind},
          {"path", s.path.string()},
          {"train_limit", s.train_limit},
          {"test_limit", s.test_limit},
          {"height", s.height},
          {"width", s.width}};
}

DatasetSpec dataset_spec_from_json(const nlohmann::json& j) {
  reject_unknown(j, "dataset", {"kind", "path", "train_limit", "test_limit", "height", "width"});
  DatasetSpec s;
  std::string path;
  read(j, "kind", "dataset", s.kind);
  read(j, "path", "dataset", path);
  read(j, "train_limit", "dataset", s.train_limit);
  read(j, "test_limit", "dataset", s.test_limit);
  read(j, "height", "dataset", s.height);
  read(j, "width", "dataset", s.width);
  if (s.kind != "mnist" && s.kind != "folder") config_error("dataset.kind", "must be \"mnist\" or \"folder\"");
  if (path.empty()) config_error("dataset.path", "required");
  if (s.train_limit < 0 || s.test_limit < 0) config_error("dataset", "limits must be >= 0");
  if (s.height < 1 || s.width < 1) config_error("dataset", "height and width must be >= 1");
  s.path = path;
  return s;
}

DatasetPair load_datasets(const DatasetSpec& spec) {
  if (!std::filesystem::is_directory(spec.path)) {
    throw Error(ErrorCode::io, "dataset directory not found: " + spec.path.string(), "dataset.path");
  }
  if (spec.kind == "mnist") {
    auto m = load_mnist(spec.path);
    return {limit(std::move(m.train), spec.train_limit), limit(std::move(m.test), spec.test_limit)};
  }
  Dataset train = load_image_folder(spec.path / "train", spec.height, spec.width, Split::train);
  Dataset test = load_image_folder(spec.path / "test", spec.height, spec.width, Split::test);
  if (train.class_names != test.class_names) {
    throw Error(ErrorCode::invalid_argument, "train and test splits have different classes");
  }
  return {limit(std::move(train), spec.train_limit), limit(std::move(test), spec.test_limit)};
}

nlohmann::json to_json(const SensitivitySettings& s) {
  return {{"runs", s.runs},
          {"num_batches", s.options.num_batches},
          {"batch_size", s.options.batch_size},
          {"instability", to_string(s.measure)},
          {"seed", s.seed}};
}

SensitivitySettings sensitivity_settings_from_json(const nlohmann::json& j, SensitivitySettings s) {
  reject_unknown(j, "sensitivity", {"runs", "num_batches", "batch_size", "instability", "seed"});
  read(j, "runs", "sensitivity", s.runs);
  read(j, "num_batches", "sensitivity", s.options.num_batches);
  read(j, "batch_size", "sensitivity", s.options.batch_size);
  read(j, "seed", "sensitivity", s.seed);
  std::string measure(to_string(s.measure));
  read(j, "instability", "sensitivity", measure);
  try {
    s.measure = instability_measure_from_string(measure);
  } catch (const Error&) {
    config_error("sensitivity.instability", "must be \"mad\" or \"variance\"");
  }
  if (s.runs < 1) config_error("sensitivity.runs", "must be >= 1");
  if (s.options.num_batches < 1) config_error("sensitivity.num_batches", "must be >= 1");
  if (s.options.batch_size < 1) config_error("sensitivity.batch_size", "must be >= 1");
  return s;
}

AppConfig app_config_from_json(const nlohmann::json& j) {
  reject_unknown(j, "", {"dataset", "architecture", "train", "finetune", "sensitivity", "seed"});
  AppConfig c;
  if (!j.contains("dataset")) config_error("dataset", "required");
  c.dataset = dataset_spec_from_json(j["dataset"]);
  if (j.contains("architecture")) c.architecture = j["architecture"];
  if (!c.architecture.is_string() && !c.architecture.is_object()) config_error("architecture", "must be a name or an object");
  read(j, "seed", "", c.seed);
  if (j.contains("train")) {
    const auto& t = j["train"];
    reject_unknown(t, "train", {"epochs", "learning_rate", "optimizer", "batch_size"});
    read(t, "epochs", "train", c.train.epochs);
    read(t, "learning_rate", "train", c.train.learning_rate);
    read(t, "batch_size", "train", c.train.batch_size);
    std::string opt(to_string(c.train.optimizer));
    read(t, "optimizer", "train", opt);
    try {
      c.train.optimizer = optimizer_kind_from_string(opt);
    } catch (const Error&) {
      config_error("train.optimizer", "must be \"sgd\" or \"adam\"");
    }
    if (c.train.epochs < 0) config_error("train.epochs", "must be >= 0");
    if (!(c.train.learning_rate > 0)) config_error("train.learning_rate", "must be > 0");
    if (c.train.batch_size < 1) config_error("train.batch_size", "must be >= 1");
  }
  if (j.contains("finetune")) {
    const auto& f = j["finetune"];
    reject_unknown(f, "finetune",
                   {"delta_loss", "target_accuracy", "max_epochs", "learning_rate", "lr", "optimizer", "batch_size", "seed"});
    try {
      c.finetune = finetune_config_from_json(f);
    } catch (const Error& e) {
      config_error("finetune", e.what());
    }
  }
  if (j.contains("sensitivity")) c.sensitivity = sensitivity_settings_from_json(j["sensitivity"]);
  return c;
}

AppConfig load_app_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorCode::io, "cannot open config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::invalid_argument, "config: not valid JSON: " + std::string(e.what()));
  }
  return app_config_from_json(j);
}

nlohmann::json to_json(const AppConfig& c) {
  return {{"dataset", to_json(c.dataset)},
          {"architecture", c.architecture},
          {"train",
           {{"epochs", c.train.epochs},
            {"learning_rate", c.train.learning_rate},
            {"optimizer", to_string(c.train.optimizer)},
            {"batch_size", c.train.batch_size}}},
          {"finetune", to_json(c.finetune)},
          {"sensitivity", to_json(c.sensitivity)},
          {"seed", c.seed}};
}

Architecture resolve_architecture(const nlohmann::json& spec, const Dataset& data) {
  const Shape in = data.example_shape();
  if (spec.is_string()) {
    const auto name = spec.get<std::string>();
    if (name == "mnist") {
      Architecture a = mnist_architecture();
      if (in != a.input_shape) {
        throw Error(ErrorCode::invalid_argument, "mnist architecture expects 1x28x28 input, data is " + shape_string(in));
      }
      if (data.num_classes() != a.num_classes()) {
        throw Error(ErrorCode::invalid_argument, "mnist architecture has 10 classes, data has " +
                                                     std::to_string(data.num_classes()));
      }
      a.class_names = data.class_names;
      return a;
    }
    if (name == "six_conv") return six_conv_architecture(in[0], in[1], in[2], data.class_names);
    throw Error(ErrorCode::invalid_argument, "unknown architecture '" + name + "'", "architecture");
  }
  if (spec.contains("layers")) {
    Architecture a = architecture_from_json(spec);
    if (a.input_shape != in) throw Error(ErrorCode::invalid_argument, "architecture input does not match the data");
    if (a.num_classes() != data.num_classes()) throw Error(ErrorCode::invalid_argument, "architecture class count does not match the data");
    return a;
  }
  if (spec.value("name", "") == "six_conv") {
    return six_conv_architecture(in[0], in[1], in[2], data.class_names, spec.value("width_scale", 1.0));
  }
  throw Error(ErrorCode::invalid_argument, "architecture object needs \"layers\" or \"name\": \"six_conv\"", "architecture");
}

}  // namespace cnnp
