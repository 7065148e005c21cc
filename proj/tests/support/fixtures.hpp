#pragma once

#include <algorithm>
#include <random>
#include <vector>

#include "doctest.h"
#include "finecontrol/error.hpp"
#include "finecontrol/pose_geometry.hpp"
#include "support/oracles.hpp"

namespace fixtures {

using finecontrol::pose::Keypoint;
using finecontrol::pose::Pose2D;
using finecontrol::pose::PoseFormat;
using oracles::random_pose;

// Standing COCO17 figure inside a 64x64 canvas.
inline Pose2D standing_coco(double dx = 0.0, double dy = 0.0) {
  const double xy[17][2] = {{32, 8},  {30, 6},  {34, 6},  {28, 7},  {36, 7},  {25, 16},
                            {39, 16}, {22, 26}, {42, 26}, {21, 35}, {43, 35}, {28, 36},
                            {36, 36}, {27, 47}, {37, 47}, {27, 58}, {37, 58}};
  Pose2D p;
  p.format = PoseFormat::kCoco17;
  for (const auto& k : xy) p.keypoints.push_back({k[0] + dx, k[1] + dy, 1});
  return p;
}

inline Pose2D two_point_coco(double x0, double y0, double x1, double y1) {
  Pose2D p;
  p.format = PoseFormat::kCoco17;
  p.keypoints.assign(17, Keypoint{});
  p.keypoints[5] = {x0, y0, 1};
  p.keypoints[7] = {x1, y1, 1};
  return p;
}

// Code of the finecontrol::Error thrown by fn; fails the test when nothing is thrown.
inline finecontrol::ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const finecontrol::Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return finecontrol::ErrorCode::kIo;
}

}  // namespace fixtures
