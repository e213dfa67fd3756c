#pragma once

#include <Eigen/Dense>

#include "clims/types.hpp"

// Color anchors shared by the scene generator and the default concept table.
// Chromaticities are spaced against the default tolerances (0.08 for object
// concepts, 0.06 for background concepts, membership support 3*tol) so that:
//   - each object/background color is a full member of its own concept only,
//   - the accent colors (cab, sail) are ~0.5 members of their object concept,
//   - every other pairing, and the gray canvas at any luminance, is exactly
//     outside every concept's support.
// Chromaticity distances: train<->cab 0.093, train<->railroad 0.270,
// boat<->sail 0.093, boat<->river 0.270, canvas<->anything >= 0.45.
namespace clims::palette {

inline Eigen::Vector3d train_body() { return {0.84, 0.204, 0.156}; }
inline Eigen::Vector3d train_cab() { return {0.7608, 0.2832, 0.156}; }
inline Eigen::Vector3d railroad() { return {0.92, 0.05, 0.03}; }
inline Eigen::Vector3d boat_hull() { return {0.156, 0.204, 0.84}; }
inline Eigen::Vector3d boat_sail() { return {0.156, 0.2832, 0.7608}; }
inline Eigen::Vector3d river() { return {0.03, 0.05, 0.92}; }
inline real canvas_gray() { return 0.5; }

inline real object_tolerance() { return 0.08; }
inline real background_tolerance() { return 0.06; }

}  // namespace clims::palette
