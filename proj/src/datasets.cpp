#include "cnnp/datasets.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <memory>
#include <unordered_map>

#include <spdlog/spdlog.h>

#include "cnnp/image_io.hpp"
#include "cnnp/rng.hpp"

namespace cnnp {
namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Whole-file read; gzread passes uncompressed files through unchanged.
std::vector<std::uint8_t> read_maybe_gzip(const std::filesystem::path& path) {
  std::unique_ptr<gzFile_s, decltype(&gzclose)> f(gzopen(path.c_str(), "rb"), &gzclose);
  if (!f) throw Error(ErrorCode::io, "cannot open " + path.string());
  std::vector<std::uint8_t> data;
  std::array<std::uint8_t, 1 << 16> buf;
  int n;
  while ((n = gzread(f.get(), buf.data(), static_cast<unsigned>(buf.size()))) > 0) {
    data.insert(data.end(), buf.begin(), buf.begin() + n);
  }
  if (n < 0) throw Error(ErrorCode::io, "read error in " + path.string());
  return data;
}

std::uint32_t be32(const std::vector<std::uint8_t>& d, std::size_t off) {
  return (std::uint32_t{d[off]} << 24) | (std::uint32_t{d[off + 1]} << 16) |
         (std::uint32_t{d[off + 2]} << 8) | std::uint32_t{d[off + 3]};
}

std::filesystem::path find_idx(const std::filesystem::path& dir, const std::string& stem) {
  for (const std::string& name : {stem, stem + ".gz"}) {
    if (std::filesystem::exists(dir / name)) return dir / name;
  }
  // Some mirrors use '.' instead of '-' before "idx".
  std::string dotted = stem;
  if (auto p = dotted.rfind("-idx"); p != std::string::npos) dotted[p] = '.';
  for (const std::string& name : {dotted, dotted + ".gz"}) {
    if (std::filesystem::exists(dir / name)) return dir / name;
  }
  throw Error(ErrorCode::io, "missing MNIST file " + (dir / stem).string());
}

bool is_image_file(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

}  // namespace

std::string_view to_string(Split split) { return split == Split::train ? "train" : "test"; }

Shape Dataset::example_shape() const {
  return {images.dim(1), images.dim(2), images.dim(3)};
}

Index Dataset::example_size() const { return images.dim(1) * images.dim(2) * images.dim(3); }

std::size_t Dataset::index_of(std::string_view id) const {
  auto it = std::find(ids.begin(), ids.end(), id);
  if (it == ids.end()) throw Error(ErrorCode::not_found, "no instance with id '" + std::string(id) + "'");
  return static_cast<std::size_t>(it - ids.begin());
}

Batch gather(const Dataset& data, std::span<const std::size_t> indices) {
  const Index per = data.example_size();
  Shape shape = data.images.shape();
  shape[0] = static_cast<Index>(indices.size());
  Batch b{Tensorf(shape), {}};
  b.labels.reserve(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Index i = static_cast<Index>(indices[k]);
    if (i >= data.size()) throw Error(ErrorCode::invalid_argument, "batch index out of range");
    std::copy_n(data.images.data() + i * per, per, b.images.data() + static_cast<Index>(k) * per);
    b.labels.push_back(data.labels[indices[k]]);
  }
  return b;
}

Batch slice(const Dataset& data, Index begin, Index end) {
  const Index per = data.example_size();
  Shape shape = data.images.shape();
  shape[0] = end - begin;
  Batch b{Tensorf(shape), {data.labels.begin() + begin, data.labels.begin() + end}};
  std::copy_n(data.images.data() + begin * per, (end - begin) * per, b.images.data());
  return b;
}

Dataset subset(const Dataset& data, std::span<const std::size_t> indices) {
  Batch b = gather(data, indices);
  Dataset out;
  out.images = std::move(b.images);
  out.labels = std::move(b.labels);
  out.class_names = data.class_names;
  out.split = data.split;
  for (std::size_t i : indices) out.ids.push_back(data.ids[i]);
  return out;
}

Dataset head(const Dataset& data, Index n) {
  if (n <= 0 || n >= data.size()) return data;
  std::vector<std::size_t> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return subset(data, idx);
}

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 Split split) {
  const auto img = read_maybe_gzip(images_path);
  const auto lab = read_maybe_gzip(labels_path);
  if (img.size() < 16 || be32(img, 0) != kIdxImagesMagic) {
    throw Error(ErrorCode::bad_magic, "IDX image magic mismatch in " + images_path.string());
  }
  if (lab.size() < 8 || be32(lab, 0) != kIdxLabelsMagic) {
    throw Error(ErrorCode::bad_magic, "IDX label magic mismatch in " + labels_path.string());
  }
  const std::size_t n = be32(img, 4), rows = be32(img, 8), cols = be32(img, 12);
  const std::size_t nl = be32(lab, 4);
  if (img.size() < 16 + n * rows * cols) {
    throw Error(ErrorCode::truncated, "truncated IDX image file " + images_path.string());
  }
  if (lab.size() < 8 + nl) throw Error(ErrorCode::truncated, "truncated IDX label file " + labels_path.string());
  if (nl != n) {
    throw Error(ErrorCode::shape_mismatch, "IDX image/label counts differ: " + std::to_string(n) +
                                               " vs " + std::to_string(nl));
  }
  if (n == 0) throw Error(ErrorCode::empty_dataset, "IDX file holds no examples");

  Dataset d;
  d.split = split;
  d.images = Tensorf({static_cast<Index>(n), 1, static_cast<Index>(rows), static_cast<Index>(cols)});
  for (std::size_t i = 0; i < n * rows * cols; ++i) {
    d.images[static_cast<Index>(i)] = static_cast<float>(img[16 + i]) / 255.0f;
  }
  int max_label = 0;
  d.labels.resize(n);
  d.ids.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = lab[8 + i];
    max_label = std::max(max_label, d.labels[i]);
    d.ids[i] = std::to_string(i);
  }
  const int classes = std::max(10, max_label + 1);
  for (int c = 0; c < classes; ++c) d.class_names.push_back(std::to_string(c));
  return d;
}

MnistSplits load_mnist(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw Error(ErrorCode::io, "not a directory: " + dir.string());
  MnistSplits s;
  s.train = load_idx(find_idx(dir, "train-images-idx3-ubyte"), find_idx(dir, "train-labels-idx1-ubyte"),
                     Split::train);
  s.test = load_idx(find_idx(dir, "t10k-images-idx3-ubyte"), find_idx(dir, "t10k-labels-idx1-ubyte"),
                    Split::test);
  return s;
}

Dataset load_image_folder(const std::filesystem::path& dir, Index height, Index width, Split split) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw Error(ErrorCode::io, "not a directory: " + dir.string());
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory()) class_dirs.push_back(e.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw Error(ErrorCode::empty_dataset, "no class directories in " + dir.string());

  Dataset d;
  d.split = split;
  std::vector<Tensorf> decoded;
  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    d.class_names.push_back(class_dirs[c].filename().string());
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(class_dirs[c])) {
      if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::size_t kept = 0;
    for (const auto& f : files) {
      try {
        decoded.push_back(resize_bilinear(decode_image(f), height, width));
      } catch (const Error& e) {
        spdlog::warn("skipping {}: {}", f.string(), e.what());
        ++d.skipped_files;
        continue;
      }
      d.labels.push_back(static_cast<int>(c));
      d.ids.push_back(fs::relative(f, dir).generic_string());
      ++kept;
    }
    if (kept == 0) {
      throw Error(ErrorCode::empty_dataset, "class '" + d.class_names.back() + "' has no readable images");
    }
  }
  d.images = Tensorf({static_cast<Index>(decoded.size()), 3, height, width});
  const Index per = 3 * height * width;
  for (std::size_t i = 0; i < decoded.size(); ++i) {
    std::copy_n(decoded[i].data(), per, d.images.data() + static_cast<Index>(i) * per);
  }
  return d;
}

std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                              bool shuffled, bool drop_last) {
  if (batch_size == 0) throw Error(ErrorCode::invalid_argument, "batch_size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffled) {
    Rng rng(seed);
    order = permutation(n, rng);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t begin = 0; begin < n; begin += batch_size) {
    const std::size_t end = std::min(n, begin + batch_size);
    if (drop_last && end - begin < batch_size) break;
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(begin),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

}  // namespace cnnp
