#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cnnp/tensor.hpp"

namespace cnnp {

enum class Split { train, test };

std::string_view to_string(Split split);

/// Labeled images in [0, 1], NCHW.
struct Dataset {
  Tensorf images;
  std::vector<int> labels;
  std::vector<std::string> class_names;
  Split split = Split::train;
  std::vector<std::string> ids;  // unique per instance
  std::size_t skipped_files = 0;

  Index size() const { return static_cast<Index>(labels.size()); }
  Index num_classes() const { return static_cast<Index>(class_names.size()); }
  /// [C, H, W] of one example.
  Shape example_shape() const;
  Index example_size() const;
  /// Position of the instance with id `id`; throws not_found.
  std::size_t index_of(std::string_view id) const;
};

struct Batch {
  Tensorf images;
  std::vector<int> labels;
};

Batch gather(const Dataset& data, std::span<const std::size_t> indices);
Batch slice(const Dataset& data, Index begin, Index end);
Dataset subset(const Dataset& data, std::span<const std::size_t> indices);
/// First `n` examples (all when n <= 0 or n >= size).
Dataset head(const Dataset& data, Index n);

/// Reads one IDX image/label file pair (optionally gzip-compressed).
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, Split split);

struct MnistSplits {
  Dataset train;
  Dataset test;
};

/// Expects train-images-idx3-ubyte, train-labels-idx1-ubyte,
/// t10k-images-idx3-ubyte and t10k-labels-idx1-ubyte (".gz" variants accepted).
MnistSplits load_mnist(const std::filesystem::path& dir);

/// One subdirectory per class (sorted name order gives the class index),
/// PNG/JPEG files inside. Images are converted to RGB, bilinearly resized to
/// height x width and scaled to [0, 1]. Undecodable files are skipped and counted.
Dataset load_image_folder(const std::filesystem::path& dir, Index height, Index width,
                          Split split = Split::train);

/// Index batches over 0..n-1; shuffled batches use a seeded Fisher-Yates
/// permutation. The final partial batch is kept unless `drop_last`.
std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size,
                                              std::uint64_t seed, bool shuffled,
                                              bool drop_last = false);

}  // namespace cnnp
