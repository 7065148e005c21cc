#pragma once

#include "finecontrol/pose_geometry.hpp"

namespace finecontrol::pose {

/// Keypoint box of the standing-figure template in units of figure height,
/// relative to (centre x, top y).
struct FigureExtent {
  double x0 = -0.24;
  double x1 = 0.24;
  double y0 = 0.06;
  double y1 = 0.98;
};

inline constexpr FigureExtent kFigureExtent{};

/// COCO17 standing figure of the given height whose head top sits at `top`.
Pose2D standing_figure(double center_x, double top, double height);

/// Template stretched so that its keypoint box is [x0, x1] x [y0, y1].
Pose2D fit_figure(double x0, double y0, double x1, double y1);

/// Keypoint-box width of a figure of the given height.
inline double figure_width(double height) { return (kFigureExtent.x1 - kFigureExtent.x0) * height; }

}  // namespace finecontrol::pose
