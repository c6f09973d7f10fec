#pragma once

// Query/class feature aggregation. With f = query features and g = class
// features:
//   rw       [f*g]
//   rw_q     [f*g, f]
//   rw_q_c   [f*g, f, g]
//   rw_diff  [f*g, f-g]
//   full     [f*g, f-g, f]
// No normalization happens here; encoders own their output scale.

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fsdv/nn/autograd.hpp"

namespace fsdv::agg {

enum class Scheme { kRw, kRwQ, kRwQC, kRwDiff, kFull };

inline constexpr Scheme kAllSchemes[] = {Scheme::kRw, Scheme::kRwQ, Scheme::kRwQC,
                                         Scheme::kRwDiff, Scheme::kFull};

using FeatureVector = std::vector<double>;

/// Output width divided by the input width D.
int width_multiple(Scheme scheme);

std::string to_string(Scheme scheme);

/// Accepts full | rw | rw_q | rw_q_c | rw_diff; throws ConfigError otherwise.
Scheme parse_scheme(std::string_view name);

FeatureVector aggregate(const FeatureVector& f_qry, const FeatureVector& f_cls,
                        Scheme scheme);

/// Row-paired version: f_qry and f_cls are both [N,D]; output [N, m*D].
template <typename T>
nn::Var<T> aggregate(const nn::Var<T>& f_qry, const nn::Var<T>& f_cls, Scheme scheme);

/// Elementwise mean; throws EmptyClassError on an empty list.
FeatureVector average_class_features(std::span<const FeatureVector> features);

}  // namespace fsdv::agg
