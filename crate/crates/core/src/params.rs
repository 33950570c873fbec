//! Named parameter trees.
//!
//! Parameter structs are generic over their leaf type so the same layout
//! holds values (`Mat`), tape handles (`Var`), gradients or optimizer
//! moments. Each tree exposes `visit`, `visit_mut` and `map`, producing
//! dotted names such as `encoder.projection.img_region.weight` that double
//! as checkpoint file names.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Mat, Var};

macro_rules! param_tree {
    ($name:ident { $($field:ident : $kind:ident),* $(,)? }) => {
        impl<T> $name<T> {
            pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
                $( param_tree!(@visit $kind, self.$field, format!("{prefix}{}", stringify!($field)), f); )*
            }

            pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
                $( param_tree!(@visit_mut $kind, self.$field, format!("{prefix}{}", stringify!($field)), f); )*
            }

            pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> $name<U> {
                $name {
                    $( $field: param_tree!(@map $kind, self.$field, format!("{prefix}{}", stringify!($field)), f), )*
                }
            }
        }
    };
    (@visit leaf, $e:expr, $path:expr, $f:ident) => { $f($path, &$e) };
    (@visit tree, $e:expr, $path:expr, $f:ident) => { $e.visit(&format!("{}.", $path), $f) };
    (@visit list, $e:expr, $path:expr, $f:ident) => {
        for (i, x) in $e.iter().enumerate() { $f(format!("{}.{i}", $path), x) }
    };
    (@visit_mut leaf, $e:expr, $path:expr, $f:ident) => { $f($path, &mut $e) };
    (@visit_mut tree, $e:expr, $path:expr, $f:ident) => { $e.visit_mut(&format!("{}.", $path), $f) };
    (@visit_mut list, $e:expr, $path:expr, $f:ident) => {
        for (i, x) in $e.iter_mut().enumerate() { $f(format!("{}.{i}", $path), x) }
    };
    (@map leaf, $e:expr, $path:expr, $f:ident) => { $f(&$path, &$e) };
    (@map tree, $e:expr, $path:expr, $f:ident) => { $e.map(&format!("{}.", $path), $f) };
    (@map list, $e:expr, $path:expr, $f:ident) => {
        $e.iter().enumerate().map(|(i, x)| $f(&format!("{}.{i}", $path), x)).collect()
    };
}

pub(crate) use param_tree;

/// `x W + b` with `W: in × out` and `b: 1 × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine<T> {
    pub weight: T,
    pub bias: T,
}

param_tree!(Affine { weight: leaf, bias: leaf });

impl Affine<Mat> {
    pub fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: gaussian(rng, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt()),
            bias: Mat::zeros((1, fan_out)),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Mat::zeros((fan_in, fan_out)),
            bias: Mat::zeros((1, fan_out)),
        }
    }
}

impl<'t> Affine<Var<'t>> {
    pub fn apply(&self, x: &Var<'t>) -> Var<'t> {
        x.matmul(&self.weight).add_row(&self.bias)
    }
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Array2::from_shape_simple_fn((rows, cols), || scale * rng.sample::<f64, _>(StandardNormal))
}

/// Identity plus a small Gaussian perturbation.
pub fn near_identity(rng: &mut impl Rng, d: usize, noise: f64) -> Mat {
    let mut m = gaussian(rng, d, d, noise / (d as f64).sqrt());
    for i in 0..d {
        m[[i, i]] += 1.0;
    }
    m
}

/// Flattened `(name, value)` list of a tree.
pub fn named<'a, T>(visit: impl FnOnce(&mut dyn FnMut(String, &'a T))) -> Vec<(String, &'a T)> {
    let mut out = Vec::new();
    visit(&mut |name, v| out.push((name, v)));
    out
}

/// Rounds every entry to the nearest `f32`. Values kept on this grid
/// survive a round trip through the on-disk format unchanged.
pub fn round_to_f32(m: &mut Mat) {
    m.mapv_inplace(|v| f64::from(v as f32));
}
