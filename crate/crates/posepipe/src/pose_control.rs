//! Skeleton types, bone-colored rasterization, and the zero-initialized
//! multi-resolution pose encoder whose outputs are injected into the
//! denoiser as residuals.
//!
//! The skeleton has 13 joints and 12 bones (a tree: the hips are folded
//! into the pelvis). Each bone rasterizes as a 1-px Bresenham line in its
//! own fixed color, which lets the evaluation detector invert rendering by
//! exact color matching.

use crate::error::{PipelineError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

pub const NUM_JOINTS: usize = 13;
pub const NUM_BONES: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(usize)]
pub enum Joint {
    Head = 0,
    Neck = 1,
    Pelvis = 2,
    LeftShoulder = 3,
    LeftElbow = 4,
    LeftWrist = 5,
    RightShoulder = 6,
    RightElbow = 7,
    RightWrist = 8,
    LeftKnee = 9,
    LeftAnkle = 10,
    RightKnee = 11,
    RightAnkle = 12,
}

/// Bone topology as (parent, child) joint indices; also the draw order.
pub const BONES: [(usize, usize); NUM_BONES] = [
    (1, 0),   // neck -> head
    (1, 2),   // neck -> pelvis
    (1, 3),   // neck -> left shoulder
    (3, 4),   // left shoulder -> elbow
    (4, 5),   // left elbow -> wrist
    (1, 6),   // neck -> right shoulder
    (6, 7),   // right shoulder -> elbow
    (7, 8),   // right elbow -> wrist
    (2, 9),   // pelvis -> left knee
    (9, 10),  // left knee -> ankle
    (2, 11),  // pelvis -> right knee
    (11, 12), // right knee -> ankle
];

/// Fixed bone colors. Every pair of drawable colors (bones, body colors,
/// backgrounds) is at least 0.25 apart in max-channel distance, so the
/// detector's +/-0.1 tolerance can never confuse two of them.
pub const BONE_COLORS: [[f32; 3]; NUM_BONES] = [
    [1.0, 0.0, 1.0], // magenta
    [0.0, 1.0, 1.0], // cyan
    [1.0, 0.5, 0.0], // orange
    [0.5, 1.0, 0.0], // chartreuse
    [0.0, 0.5, 1.0], // azure
    [0.5, 0.0, 1.0], // violet
    [1.0, 0.0, 0.5], // rose
    [0.0, 1.0, 0.5], // spring
    [0.5, 0.0, 0.0], // maroon
    [0.0, 0.5, 0.0], // dark green
    [0.0, 0.0, 0.5], // navy
    [0.5, 0.5, 0.0], // olive
];

/// Articulated 2-D pose in normalized coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    /// (x, y) per joint, each in [0, 1].
    pub joints: [[f32; 2]; NUM_JOINTS],
    pub visibility: [bool; NUM_JOINTS],
}

impl Skeleton {
    pub fn all_visible(joints: [[f32; 2]; NUM_JOINTS]) -> Self {
        Self {
            joints,
            visibility: [true; NUM_JOINTS],
        }
    }

    pub fn visible_count(&self) -> usize {
        self.visibility.iter().filter(|&&v| v).count()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, j) in self.joints.iter().enumerate() {
            if !(0.0..=1.0).contains(&j[0]) || !(0.0..=1.0).contains(&j[1]) {
                return Err(PipelineError::Parameter(format!(
                    "joint {} at ({}, {}) outside [0, 1]",
                    i, j[0], j[1]
                )));
            }
        }
        Ok(())
    }

    /// Linear interpolation of joint positions; visibility is AND-ed.
    pub fn lerp(&self, other: &Skeleton, t: f32) -> Skeleton {
        let mut joints = [[0.0f32; 2]; NUM_JOINTS];
        let mut visibility = [true; NUM_JOINTS];
        for i in 0..NUM_JOINTS {
            joints[i][0] = self.joints[i][0] + (other.joints[i][0] - self.joints[i][0]) * t;
            joints[i][1] = self.joints[i][1] + (other.joints[i][1] - self.joints[i][1]) * t;
            visibility[i] = self.visibility[i] && other.visibility[i];
        }
        Skeleton { joints, visibility }
    }
}

/// Canonical upright pose used as the generator's base and as the
/// detector's orientation prior for disconnected bones.
pub fn canonical_skeleton() -> Skeleton {
    let mut j = [[0.0f32; 2]; NUM_JOINTS];
    j[Joint::Pelvis as usize] = [0.50, 0.58];
    j[Joint::Neck as usize] = [0.50, 0.38];
    j[Joint::Head as usize] = [0.50, 0.26];
    j[Joint::LeftShoulder as usize] = [0.40, 0.40];
    j[Joint::LeftElbow as usize] = [0.36, 0.50];
    j[Joint::LeftWrist as usize] = [0.34, 0.60];
    j[Joint::RightShoulder as usize] = [0.60, 0.40];
    j[Joint::RightElbow as usize] = [0.64, 0.50];
    j[Joint::RightWrist as usize] = [0.66, 0.60];
    j[Joint::LeftKnee as usize] = [0.45, 0.72];
    j[Joint::LeftAnkle as usize] = [0.44, 0.86];
    j[Joint::RightKnee as usize] = [0.55, 0.72];
    j[Joint::RightAnkle as usize] = [0.56, 0.86];
    Skeleton::all_visible(j)
}

/// Normalized coordinate -> pixel index (round to nearest grid point).
pub fn to_pixel(coord: f32, extent: usize) -> i64 {
    (coord * (extent.saturating_sub(1)) as f32).round() as i64
}

/// Pixel index -> normalized coordinate (inverse of [`to_pixel`]).
pub fn to_norm(px: i64, extent: usize) -> f32 {
    if extent <= 1 {
        0.0
    } else {
        px as f32 / (extent - 1) as f32
    }
}

/// Integer Bresenham line, inclusive of both endpoints.
pub fn bresenham(mut x0: i64, mut y0: i64, x1: i64, y1: i64) -> Vec<(i64, i64)> {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut pts = Vec::new();
    loop {
        pts.push((x0, y0));
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
    pts
}

/// A rasterized skeleton image, dims [H, W, 3], background exactly zero.
pub type PoseMap = Tensor<f32>;

/// Draws each visible bone as an anti-aliasing-free 1-px line in its fixed
/// color; bones whose either joint is invisible are suppressed. Later bones
/// overwrite earlier ones where lines cross. Deterministic.
pub fn rasterize(skeleton: &Skeleton, height: usize, width: usize) -> PoseMap {
    let mut map = Tensor::<f32>::zeros(&[height, width, 3]);
    for (bi, &(a, b)) in BONES.iter().enumerate() {
        if !skeleton.visibility[a] || !skeleton.visibility[b] {
            continue;
        }
        let x0 = to_pixel(skeleton.joints[a][0], width);
        let y0 = to_pixel(skeleton.joints[a][1], height);
        let x1 = to_pixel(skeleton.joints[b][0], width);
        let y1 = to_pixel(skeleton.joints[b][1], height);
        for (x, y) in bresenham(x0, y0, x1, y1) {
            if x < 0 || y < 0 || x as usize >= width || y as usize >= height {
                continue;
            }
            let off = (y as usize * width + x as usize) * 3;
            map.data_mut()[off..off + 3].copy_from_slice(&BONE_COLORS[bi]);
        }
    }
    map
}

/// Rasterizes a sequence of skeletons into [F, H, W, 3].
pub fn rasterize_sequence(skeletons: &[Skeleton], height: usize, width: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(skeletons.len() * height * width * 3);
    for s in skeletons {
        data.extend_from_slice(rasterize(s, height, width).data());
    }
    Tensor::from_vec(&[skeletons.len(), height, width, 3], data).expect("rasterize dims")
}

/// Residual feature maps produced by the pose encoder, one per injected
/// level, shaped [N, h_l, w_l, c_l] matching the denoiser encoder levels.
pub struct PoseResiduals<T> {
    pub levels: Vec<Tensor<T>>,
}

/// Elementwise residual injection. The level index is only used for error
/// messages.
pub fn inject<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    residual: Var,
    level: usize,
) -> Result<Var> {
    if g.value(features).dims() != g.value(residual).dims() {
        return Err(PipelineError::Shape(format!(
            "pose residual at level {}: features {:?} vs residual {:?}",
            level,
            g.value(features).dims(),
            g.value(residual).dims()
        )));
    }
    g.add(features, residual)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_invisible_rasterizes_to_zero() {
        let mut s = canonical_skeleton();
        s.visibility = [false; NUM_JOINTS];
        let map = rasterize(&s, 32, 32);
        assert!(map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invisible_joint_suppresses_incident_bones_only() {
        let mut s = canonical_skeleton();
        s.visibility[Joint::LeftWrist as usize] = false;
        let map = rasterize(&s, 64, 64);
        // left elbow->wrist bone color absent
        let c = BONE_COLORS[4];
        let found = map
            .data()
            .chunks(3)
            .any(|p| p[0] == c[0] && p[1] == c[1] && p[2] == c[2]);
        assert!(!found);
        // but other bones still present
        let c = BONE_COLORS[0];
        let found = map
            .data()
            .chunks(3)
            .any(|p| p[0] == c[0] && p[1] == c[1] && p[2] == c[2]);
        assert!(found);
    }

    /// Diagonal from (0,0) to (1,1) on an 8x8 canvas: the pixel set must
    /// equal the per-column rounding enumeration (independent arithmetic
    /// from the integer Bresenham walker).
    #[test]
    fn diagonal_matches_per_column_rounding_oracle() {
        let mut j = [[0.0f32; 2]; NUM_JOINTS];
        j[Joint::Neck as usize] = [0.0, 0.0];
        j[Joint::Head as usize] = [1.0, 1.0];
        let mut s = Skeleton::all_visible(j);
        s.visibility = [false; NUM_JOINTS];
        s.visibility[Joint::Neck as usize] = true;
        s.visibility[Joint::Head as usize] = true;
        let map = rasterize(&s, 8, 8);
        let mut got: Vec<(usize, usize)> = Vec::new();
        for y in 0..8 {
            for x in 0..8 {
                if map.data()[(y * 8 + x) * 3] != 0.0 || map.data()[(y * 8 + x) * 3 + 2] != 0.0 {
                    got.push((x, y));
                }
            }
        }
        // oracle: for a slope-1 line, y(x) = round(x * dy/dx) per column
        let want: Vec<(usize, usize)> = (0..8)
            .map(|x| (x, ((x as f64) * 7.0 / 7.0).round() as usize))
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn degenerate_bone_draws_single_pixel() {
        let mut j = [[0.5f32; 2]; NUM_JOINTS];
        j[Joint::Neck as usize] = [0.5, 0.5];
        j[Joint::Head as usize] = [0.5, 0.5];
        let mut s = Skeleton::all_visible(j);
        s.visibility = [false; NUM_JOINTS];
        s.visibility[Joint::Neck as usize] = true;
        s.visibility[Joint::Head as usize] = true;
        let map = rasterize(&s, 9, 9);
        let lit = map.data().chunks(3).filter(|p| p.iter().any(|&v| v > 0.0)).count();
        assert_eq!(lit, 1);
    }

    #[test]
    fn rasterization_is_deterministic() {
        let s = canonical_skeleton();
        let a = rasterize(&s, 32, 32);
        let b = rasterize(&s, 32, 32);
        assert_eq!(a, b);
    }

    #[test]
    fn bone_topology_is_a_tree_over_all_joints() {
        let mut seen = [false; NUM_JOINTS];
        for &(a, b) in &BONES {
            seen[a] = true;
            seen[b] = true;
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(BONES.len(), NUM_JOINTS - 1);
    }

    #[test]
    fn drawable_colors_are_mutually_distinguishable() {
        let mut palette: Vec<[f32; 3]> = BONE_COLORS.to_vec();
        palette.push([1.0, 0.0, 0.0]);
        palette.push([0.0, 1.0, 0.0]);
        palette.push([0.0, 0.0, 1.0]);
        palette.push([1.0, 1.0, 0.0]);
        for (i, a) in palette.iter().enumerate() {
            for b in palette.iter().skip(i + 1) {
                let dist = a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0f32, f32::max);
                assert!(dist >= 0.25, "{a:?} vs {b:?}");
            }
            // at least 0.2 from any gray (black, white, gradient values)
            let gray_clearance = (0..=100)
                .map(|k| {
                    let v = k as f32 / 100.0;
                    a.iter().map(|x| (x - v).abs()).fold(0.0f32, f32::max)
                })
                .fold(f32::INFINITY, f32::min);
            assert!(gray_clearance > 0.2, "{a:?} too close to a gray");
        }
    }
}
