#pragma once

// Angle codecs, rotation math and box geometry. Everything here is pure.

#include <array>
#include <Eigen/Core>

namespace fsdv::geom {

inline constexpr int kNumBins = 24;
inline constexpr double kBinWidthDeg = 15.0;

/// Euler viewpoint in degrees. After normalize(): azi in [0, 360),
/// ele in [-90, 90], inp in [-180, 180).
struct Viewpoint {
  double azi = 0.0;
  double ele = 0.0;
  double inp = 0.0;

  friend bool operator==(const Viewpoint&, const Viewpoint&) = default;
};

using RotationMatrix = Eigen::Matrix3d;

struct AngleBinCode {
  int bin = 0;
  double offset = 0.0;  // bin widths, relative to the bin center
};

using ViewpointCode = std::array<AngleBinCode, 3>;

struct BoundingBox {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  bool valid() const { return x1 < x2 && y1 < y2; }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

using BoxDelta = std::array<double, 4>;  // (dx, dy, dw, dh)

double wrap360(double deg);
double wrap180(double deg);

Viewpoint normalize(const Viewpoint& v);

// R = Rz(inp) * Rx(ele) * Ry(azi): azimuth about the object's vertical (y)
// axis, then elevation about the camera x axis, then in-plane rotation about
// the viewing (z) axis. Maps canonical object coordinates to camera
// coordinates.
RotationMatrix euler_to_rotation(const Viewpoint& v);

/// Geodesic distance on SO(3), in degrees, range [0, 180].
double rotation_error_deg(const Viewpoint& a, const Viewpoint& b);

AngleBinCode encode_angle(double deg);
ViewpointCode encode_angle_bins(const Viewpoint& v);

/// Throws InvalidCodeError for bins outside [0, 24) or offsets outside
/// [-0.5, 0.5].
Viewpoint decode_angle_bins(const ViewpointCode& code);

double box_iou(const BoundingBox& a, const BoundingBox& b);

inline constexpr double kMaxLogScale = 4.135166556742356;  // log(1000 / 16)

/// Center/size parameterization. deltas dw, dh are clamped to kMaxLogScale.
/// When clip_width/clip_height are positive the result is clipped to
/// [0, clip_width] x [0, clip_height]; a box with non-positive size after
/// that throws DegenerateBoxError.
BoundingBox apply_box_delta(const BoundingBox& box, const BoxDelta& delta,
                            double clip_width = 0.0, double clip_height = 0.0);

BoxDelta compute_box_delta(const BoundingBox& from, const BoundingBox& to);

BoundingBox clip_box(const BoundingBox& box, double width, double height);

}  // namespace fsdv::geom
