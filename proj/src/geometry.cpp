#include "fsdv/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include <Eigen/Geometry>

#include "fsdv/error.hpp"

namespace fsdv::geom {

namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;
constexpr double kRadToDeg = 180.0 / std::numbers::pi;

Eigen::Matrix3d rot_x(double rad) {
  const double c = std::cos(rad), s = std::sin(rad);
  Eigen::Matrix3d r;
  r << 1, 0, 0, 0, c, -s, 0, s, c;
  return r;
}

Eigen::Matrix3d rot_y(double rad) {
  const double c = std::cos(rad), s = std::sin(rad);
  Eigen::Matrix3d r;
  r << c, 0, s, 0, 1, 0, -s, 0, c;
  return r;
}

Eigen::Matrix3d rot_z(double rad) {
  const double c = std::cos(rad), s = std::sin(rad);
  Eigen::Matrix3d r;
  r << c, -s, 0, s, c, 0, 0, 0, 1;
  return r;
}

}  // namespace

double wrap360(double deg) {
  if (deg >= 0.0 && deg < 360.0) return deg;
  double r = std::fmod(deg, 360.0);
  if (r < 0.0) r += 360.0;
  if (r >= 360.0) r -= 360.0;
  return r;
}

double wrap180(double deg) {
  if (deg >= -180.0 && deg < 180.0) return deg;
  double r = wrap360(deg);
  if (r >= 180.0) r -= 360.0;
  return r;
}

Viewpoint normalize(const Viewpoint& v) {
  double azi = v.azi;
  double ele = wrap180(v.ele);
  double inp = v.inp;
  // Elevation past a pole is the same rotation seen from the other side.
  if (ele > 90.0) {
    ele = 180.0 - ele;
    azi += 180.0;
    inp += 180.0;
  } else if (ele < -90.0) {
    ele = -180.0 - ele;
    azi += 180.0;
    inp += 180.0;
  }
  return {wrap360(azi), ele, wrap180(inp)};
}

RotationMatrix euler_to_rotation(const Viewpoint& v) {
  return rot_z(v.inp * kDegToRad) * rot_x(v.ele * kDegToRad) *
         rot_y(v.azi * kDegToRad);
}

double rotation_error_deg(const Viewpoint& a, const Viewpoint& b) {
  const Eigen::Matrix3d m =
      euler_to_rotation(a).transpose() * euler_to_rotation(b);
  const double cos_part = 0.5 * (m.trace() - 1.0);
  const Eigen::Vector3d axis(m(2, 1) - m(1, 2), m(0, 2) - m(2, 0),
                             m(1, 0) - m(0, 1));
  const double sin_part = 0.5 * axis.norm();
  return std::atan2(sin_part, cos_part) * kRadToDeg;
}

AngleBinCode encode_angle(double deg) {
  const double scaled = wrap360(deg) / kBinWidthDeg;
  int bin = static_cast<int>(std::floor(scaled));
  bin = std::clamp(bin, 0, kNumBins - 1);
  const double offset = std::clamp(scaled - bin - 0.5, -0.5, 0.5);
  return {bin, offset};
}

ViewpointCode encode_angle_bins(const Viewpoint& v) {
  return {encode_angle(v.azi), encode_angle(v.ele), encode_angle(v.inp)};
}

Viewpoint decode_angle_bins(const ViewpointCode& code) {
  std::array<double, 3> angles{};
  for (int k = 0; k < 3; ++k) {
    const auto& c = code[k];
    if (c.bin < 0 || c.bin >= kNumBins) {
      throw InvalidCodeError("angle bin index " + std::to_string(c.bin) +
                             " outside [0, 24)");
    }
    if (!(c.offset >= -0.5 && c.offset <= 0.5)) {
      throw InvalidCodeError("angle bin offset outside [-0.5, 0.5]");
    }
    angles[k] = (c.bin + 0.5 + c.offset) * kBinWidthDeg;
  }
  return normalize({angles[0], wrap180(angles[1]), angles[2]});
}

double box_iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

BoundingBox clip_box(const BoundingBox& box, double width, double height) {
  return {std::clamp(box.x1, 0.0, width), std::clamp(box.y1, 0.0, height),
          std::clamp(box.x2, 0.0, width), std::clamp(box.y2, 0.0, height)};
}

BoundingBox apply_box_delta(const BoundingBox& box, const BoxDelta& delta,
                            double clip_width, double clip_height) {
  const double w = box.width(), h = box.height();
  const double cx = box.x1 + 0.5 * w + delta[0] * w;
  const double cy = box.y1 + 0.5 * h + delta[1] * h;
  const double nw = w * std::exp(std::min(delta[2], kMaxLogScale));
  const double nh = h * std::exp(std::min(delta[3], kMaxLogScale));
  BoundingBox out{cx - 0.5 * nw, cy - 0.5 * nh, cx + 0.5 * nw, cy + 0.5 * nh};
  if (clip_width > 0.0 && clip_height > 0.0) {
    out = clip_box(out, clip_width, clip_height);
  }
  if (!out.valid()) throw DegenerateBoxError("box delta produced empty box");
  return out;
}

BoxDelta compute_box_delta(const BoundingBox& from, const BoundingBox& to) {
  const double w = from.width(), h = from.height();
  const double cx = from.x1 + 0.5 * w, cy = from.y1 + 0.5 * h;
  const double tcx = to.x1 + 0.5 * to.width(), tcy = to.y1 + 0.5 * to.height();
  return {(tcx - cx) / w, (tcy - cy) / h, std::log(to.width() / w),
          std::log(to.height() / h)};
}

}  // namespace fsdv::geom
