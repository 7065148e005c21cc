#include "finecontrol/figure.hpp"

namespace finecontrol::pose {
namespace {

// COCO17 order; x relative to the body axis, y from the head top.
constexpr double kTemplate[17][2] = {
    {0.00, 0.08},  {0.03, 0.06},  {-0.03, 0.06}, {0.06, 0.08},  {-0.06, 0.08}, {0.13, 0.22},
    {-0.13, 0.22}, {0.20, 0.38},  {-0.20, 0.38}, {0.24, 0.52},  {-0.24, 0.52}, {0.08, 0.55},
    {-0.08, 0.55}, {0.10, 0.76},  {-0.10, 0.76}, {0.12, 0.98},  {-0.12, 0.98}};

Pose2D place(double cx, double top, double sx, double sy) {
  Pose2D p;
  p.format = PoseFormat::kCoco17;
  for (const auto& k : kTemplate) p.keypoints.push_back({cx + k[0] * sx, top + k[1] * sy, 1});
  return p;
}

}  // namespace

Pose2D standing_figure(double center_x, double top, double height) {
  return place(center_x, top, height, height);
}

Pose2D fit_figure(double x0, double y0, double x1, double y1) {
  const FigureExtent e = kFigureExtent;
  const double sx = (x1 - x0) / (e.x1 - e.x0);
  const double sy = (y1 - y0) / (e.y1 - e.y0);
  const double cx = 0.5 * (x0 + x1);
  return place(cx, y0 - e.y0 * sy, sx, sy);
}

}  // namespace finecontrol::pose
