#include "cnnp/error.hpp"
#include "cnnp/tensor.hpp"

namespace cnnp {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::invalid_architecture: return "invalid_architecture";
    case ErrorCode::invalid_plan: return "invalid_plan";
    case ErrorCode::stale_cache: return "stale_cache";
    case ErrorCode::label_out_of_range: return "label_out_of_range";
    case ErrorCode::empty_dataset: return "empty_dataset";
    case ErrorCode::bad_magic: return "bad_magic";
    case ErrorCode::version_mismatch: return "version_mismatch";
    case ErrorCode::truncated: return "truncated";
    case ErrorCode::io: return "io";
    case ErrorCode::not_found: return "not_found";
    case ErrorCode::non_informative_pair: return "non_informative_pair";
    case ErrorCode::busy: return "busy";
    case ErrorCode::cancelled: return "cancelled";
  }
  return "unknown";
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Index shape_size(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

}  // namespace cnnp
