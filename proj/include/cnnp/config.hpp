#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "cnnp/criteria.hpp"
#include "cnnp/datasets.hpp"
#include "cnnp/finetune.hpp"

namespace cnnp {

/// Where examples come from. `kind` is "mnist" (IDX directory) or "folder"
/// (one subdirectory per class with `train/` and `test/` splits). Limits of 0
/// keep every example; otherwise the first N in file order are kept.
struct DatasetSpec {
  std::string kind = "mnist";
  std::filesystem::path path;
  Index train_limit = 0;
  Index test_limit = 0;
  Index height = 32;  // folder datasets only
  Index width = 32;
};

nlohmann::json to_json(const DatasetSpec& spec);
DatasetSpec dataset_spec_from_json(const nlohmann::json& j);

struct DatasetPair {
  Dataset train;
  Dataset test;
};

DatasetPair load_datasets(const DatasetSpec& spec);

struct SensitivitySettings {
  std::size_t runs = 5;
  SensitivityOptions options;
  InstabilityMeasure measure = InstabilityMeasure::mean_absolute_deviation;
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const SensitivitySettings& s);
SensitivitySettings sensitivity_settings_from_json(const nlohmann::json& j, SensitivitySettings base = {});

struct TrainSettings {
  int epochs = 5;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  Index batch_size = 100;
};

/// Whole-run configuration file. `architecture` is "mnist", "six_conv" or an
/// explicit architecture object.
struct AppConfig {
  DatasetSpec dataset;
  nlohmann::json architecture = "mnist";
  TrainSettings train;
  FineTuneConfig finetune;
  SensitivitySettings sensitivity;
  std::uint64_t seed = 0;
};

/// Throws invalid_argument naming the offending key.
AppConfig app_config_from_json(const nlohmann::json& j);
AppConfig load_app_config(const std::filesystem::path& path);
nlohmann::json to_json(const AppConfig& c);

/// Builds the architecture named by `spec` for data shaped like `data`.
Architecture resolve_architecture(const nlohmann::json& spec, const Dataset& data);

}  // namespace cnnp
