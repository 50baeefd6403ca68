//! Separable interpolation kernels on a [`Grid2D`].

use crate::field::{Grid2D, Vec2};

/// Interpolation used to read a sampled field at off-grid points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Interp {
    /// Tensor-product linear, 2×2 stencil.
    #[default]
    Bilinear,
    /// Tensor-product 4-point Lagrange, 4×4 stencil, exact for cubics.
    Cubic,
}

impl Interp {
    pub fn name(self) -> &'static str {
        match self {
            Interp::Bilinear => "bilinear",
            Interp::Cubic => "cubic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bilinear" => Some(Interp::Bilinear),
            "cubic" => Some(Interp::Cubic),
            _ => None,
        }
    }

    /// Number of nodes per axis touched by the stencil.
    pub fn width(self) -> usize {
        match self {
            Interp::Bilinear => 2,
            Interp::Cubic => 4,
        }
    }

    /// Calls `visit(node_index, weight)` for every node of the stencil at `p`.
    ///
    /// Returns `false` without visiting anything when the stencil would leave the grid.
    pub fn visit(self, grid: &Grid2D, p: Vec2, mut visit: impl FnMut(usize, f64)) -> bool {
        let (i, fx) = grid.cell_x(p.x);
        let (j, fy) = grid.cell_y(p.y);
        let n = grid.n() as isize;
        match self {
            Interp::Bilinear => {
                if i < 0 || j < 0 || i + 1 >= n || j + 1 >= n {
                    return false;
                }
                let wx = [1.0 - fx, fx];
                let wy = [1.0 - fy, fy];
                for (b, wyb) in wy.iter().enumerate() {
                    for (a, wxa) in wx.iter().enumerate() {
                        let idx = (j as usize + b) * grid.n() + i as usize + a;
                        visit(idx, wxa * wyb);
                    }
                }
            }
            Interp::Cubic => {
                if i < 1 || j < 1 || i + 2 >= n || j + 2 >= n {
                    return false;
                }
                let wx = lagrange4(fx);
                let wy = lagrange4(fy);
                for (b, wyb) in wy.iter().enumerate() {
                    for (a, wxa) in wx.iter().enumerate() {
                        let idx = (j as usize + b - 1) * grid.n() + i as usize + a - 1;
                        visit(idx, wxa * wyb);
                    }
                }
            }
        }
        true
    }
}

/// 4-point Lagrange weights for nodes at offsets −1, 0, 1, 2 and fraction `t ∈ [0, 1)`.
pub fn lagrange4(t: f64) -> [f64; 4] {
    let tm1 = t - 1.0;
    let tm2 = t - 2.0;
    let tp1 = t + 1.0;
    [-t * tm1 * tm2 / 6.0, tp1 * tm1 * tm2 / 2.0, -tp1 * t * tm2 / 2.0, tp1 * t * tm1 / 6.0]
}

/// Catmull–Rom (Keys, a = −1/2) weights and their derivatives with respect to `t`.
///
/// The resulting interpolant is C¹, which is what the ray integrator needs from a
/// sampled speed.
pub fn catmull_rom(t: f64) -> ([f64; 4], [f64; 4]) {
    let t2 = t * t;
    let t3 = t2 * t;
    let w = [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ];
    let dw = [
        0.5 * (-3.0 * t2 + 4.0 * t - 1.0),
        0.5 * (9.0 * t2 - 10.0 * t),
        0.5 * (-9.0 * t2 + 8.0 * t + 1.0),
        0.5 * (3.0 * t2 - 2.0 * t),
    ];
    (w, dw)
}
