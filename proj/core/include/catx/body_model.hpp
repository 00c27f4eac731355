#pragma once

#include "catx/tensor.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace catx {

// Parameter set of the simplified SMPL-X-style body (182 scalars total).
// Flat order: theta_body (66), beta (10), t (3), theta_lhand (45),
// theta_rhand (45), theta_jaw (3), phi (10).
struct SmplxParams {
  Tensor theta_body;   // [22,3] axis-angle; row 0 is the global orientation
  Tensor beta;         // [10]
  Tensor t;            // [3] meters
  Tensor theta_lhand;  // [15,3]
  Tensor theta_rhand;  // [15,3]
  Tensor theta_jaw;    // [3]
  Tensor phi;          // [10]

  static constexpr int kNumScalars = 182;

  static SmplxParams zero();
  Tensor flatten() const;                    // [182]
  static SmplxParams from_flat(const Tensor& flat);
  void validate() const;                     // dims + finiteness
};

// Joint layout: 22 body + 15 left hand + 15 right hand + 1 jaw = 53.
constexpr int kBodyJoints = 22;
constexpr int kHandJoints = 15;
constexpr int kNumJoints = 53;
constexpr int kHeadJoint = 15;
constexpr int kLeftWrist = 20;
constexpr int kRightWrist = 21;
constexpr int kJawJoint = 52;

enum class BodyPart { body, lhand, rhand, face };

struct ToyTemplateConfig {
  int ring_body = 8;   // vertices per body-bone ring
  int ring_hand = 4;
  int ring_face = 12;
};

struct BodyTemplate {
  Tensor vertices;      // [V,3] rest positions
  std::vector<std::array<int, 3>> faces;
  Tensor shape_dirs;    // [V*3,10]
  Tensor expr_dirs;     // [V*3,10], nonzero only on face vertices
  Tensor joint_regressor;  // [J,V], rows sum to 1
  Tensor skin_weights;     // [V,J], rows sum to 1
  std::vector<int> parents;            // length J, parents[0] == -1
  std::array<std::vector<int>, 4> component_masks;  // body/lhand/rhand/face
  Tensor rest_joints;   // [J,3], = joint_regressor * vertices

  int num_vertices() const { return vertices.rows(); }
  int num_joints() const { return int(parents.size()); }
  const std::vector<int>& mask(BodyPart p) const {
    return component_masks[size_t(p)];
  }
  // Radius of the sphere centered at the rest-vertex centroid.
  double bounding_sphere_radius() const;
  void validate() const;
};

struct MeshOutput {
  Tensor vertices;  // [V,3]
  Tensor joints;    // [J,3]
};

// Axis-angle to rotation matrix (value-only fast path).
// Small angles use the series form of the two Rodrigues coefficients, which
// reduces to I + skew(aa) to first order.
Tensor rodrigues(const Tensor& aa);
// Differentiable variant; aa_row is a [1,3] slice on a tape.
Tensor rodrigues_op(const Tensor& aa_row);

BodyTemplate make_toy_template(const ToyTemplateConfig& cfg, uint64_t seed);

// Template file IO (magic "CATBODY1", little-endian; see save for layout).
void save_template(const BodyTemplate& tpl, const std::string& path);
BodyTemplate load_template(const std::string& path);

// vertices = template + shape_dirs*beta + expr_dirs*phi;
// rest joints = joint_regressor * vertices.
struct ShapedRest {
  Tensor vertices;     // [V,3]
  Tensor rest_joints;  // [J,3]
};
ShapedRest shape_blend(const BodyTemplate& tpl, const Tensor& beta,
                       const Tensor& phi);

struct FkResult {
  Tensor joints;                // [J,3] posed
  std::vector<Tensor> globals;  // per joint [4,4] world transforms
};
FkResult forward_kinematics(const Tensor& rest_joints,
                            const std::vector<Tensor>& rotations,
                            const std::vector<int>& parents);

Tensor lbs(const Tensor& shaped_vertices, const std::vector<Tensor>& globals,
           const Tensor& skin_weights, const Tensor& rest_joints);

MeshOutput smplx_forward(const BodyTemplate& tpl, const SmplxParams& params);

// Left/right mirror about the x=0 plane: swaps paired joints, flips the
// (y,z) components of every axis-angle, negates t.x and mirrors beta/phi
// effects implicitly (they are symmetric by construction).
SmplxParams mirror_params(const SmplxParams& p);
// Axis-angle under x-mirror: (x,y,z) -> (x,-y,-z).
Tensor mirror_axis_angle_rows(const Tensor& aa);
const std::vector<std::pair<int, int>>& body_mirror_pairs();

// Joint index sets per component (body 0..21, hands, face = {head, jaw}).
std::vector<int> joint_set(BodyPart p);

}  // namespace catx
