#include "fsdv/aggregation.hpp"

#include <algorithm>
#include <array>

#include "fsdv/error.hpp"

namespace fsdv::agg {

int width_multiple(Scheme scheme) {
  switch (scheme) {
    case Scheme::kRw: return 1;
    case Scheme::kRwQ: return 2;
    case Scheme::kRwQC: return 3;
    case Scheme::kRwDiff: return 2;
    case Scheme::kFull: return 3;
  }
  return 0;
}

std::string to_string(Scheme scheme) {
  switch (scheme) {
    case Scheme::kRw: return "rw";
    case Scheme::kRwQ: return "rw_q";
    case Scheme::kRwQC: return "rw_q_c";
    case Scheme::kRwDiff: return "rw_diff";
    case Scheme::kFull: return "full";
  }
  return "?";
}

Scheme parse_scheme(std::string_view name) {
  for (Scheme s : kAllSchemes) {
    if (to_string(s) == name) return s;
  }
  throw ConfigError("unknown aggregation scheme '" + std::string(name) +
                    "' (expected full|rw|rw_q|rw_q_c|rw_diff)");
}

FeatureVector aggregate(const FeatureVector& f_qry, const FeatureVector& f_cls,
                        Scheme scheme) {
  if (f_qry.size() != f_cls.size()) {
    throw ShapeError("aggregate: query width " + std::to_string(f_qry.size()) +
                     " != class width " + std::to_string(f_cls.size()));
  }
  const std::size_t d = f_qry.size();
  FeatureVector out;
  out.reserve(d * width_multiple(scheme));
  for (std::size_t i = 0; i < d; ++i) out.push_back(f_qry[i] * f_cls[i]);
  auto append_diff = [&] {
    for (std::size_t i = 0; i < d; ++i) out.push_back(f_qry[i] - f_cls[i]);
  };
  switch (scheme) {
    case Scheme::kRw:
      break;
    case Scheme::kRwQ:
      out.insert(out.end(), f_qry.begin(), f_qry.end());
      break;
    case Scheme::kRwQC:
      out.insert(out.end(), f_qry.begin(), f_qry.end());
      out.insert(out.end(), f_cls.begin(), f_cls.end());
      break;
    case Scheme::kRwDiff:
      append_diff();
      break;
    case Scheme::kFull:
      append_diff();
      out.insert(out.end(), f_qry.begin(), f_qry.end());
      break;
  }
  return out;
}

template <typename T>
nn::Var<T> aggregate(const nn::Var<T>& f_qry, const nn::Var<T>& f_cls, Scheme scheme) {
  if (f_qry->value.shape() != f_cls->value.shape()) {
    throw ShapeError("aggregate: query " + nn::shape_string(f_qry->value.shape()) +
                     " vs class " + nn::shape_string(f_cls->value.shape()));
  }
  auto prod = nn::mul(f_qry, f_cls);
  switch (scheme) {
    case Scheme::kRw:
      return prod;
    case Scheme::kRwQ: {
      std::array parts{prod, f_qry};
      return nn::concat_cols<T>(parts);
    }
    case Scheme::kRwQC: {
      std::array parts{prod, f_qry, f_cls};
      return nn::concat_cols<T>(parts);
    }
    case Scheme::kRwDiff: {
      std::array parts{prod, nn::sub(f_qry, f_cls)};
      return nn::concat_cols<T>(parts);
    }
    case Scheme::kFull: {
      std::array parts{prod, nn::sub(f_qry, f_cls), f_qry};
      return nn::concat_cols<T>(parts);
    }
  }
  throw ConfigError("aggregate: bad scheme");
}

template nn::Var<float> aggregate<float>(const nn::Var<float>&, const nn::Var<float>&, Scheme);
template nn::Var<double> aggregate<double>(const nn::Var<double>&, const nn::Var<double>&,
                                           Scheme);

FeatureVector average_class_features(std::span<const FeatureVector> features) {
  if (features.empty()) throw EmptyClassError("average_class_features: empty list");
  const std::size_t d = features.front().size();
  for (const auto& f : features) {
    if (f.size() != d) throw ShapeError("average_class_features: width mismatch");
  }
  // Summing each coordinate in sorted order makes the result independent of
  // the list order, bit for bit.
  FeatureVector mean(d, 0.0);
  std::vector<double> column(features.size());
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t k = 0; k < features.size(); ++k) column[k] = features[k][i];
    std::sort(column.begin(), column.end());
    double s = 0.0;
    for (double v : column) s += v;
    mean[i] = s / static_cast<double>(features.size());
  }
  return mean;
}

}  // namespace fsdv::agg
