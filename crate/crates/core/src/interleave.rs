//! Reshape-transpose-reshape permutations for interleaved windows.
//!
//! `rearrange` moves token `(i, j)` to
//! `((i mod H_g)·M + ⌊i/H_g⌋, (j mod W_g)·M + ⌊j/W_g⌋)`, so that after an
//! ordinary `M×M` tiling every window holds the tokens whose coordinates are
//! congruent modulo `(H_g, W_g)`. `restore` is the exact inverse.
//!
//! Two routes compute the permutation: the reshape/transpose path used at
//! runtime, and an explicit gather driven by the closed-form [`IndexMap`].
//! They must agree bit-for-bit.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{feature_dims, Tape, Tensor, Var};

/// Grid geometry for interleaving: an `H×W` map split into `M×M` windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowLayout {
    h: usize,
    w: usize,
    m: usize,
}

impl WindowLayout {
    pub fn new(h: usize, w: usize, m: usize) -> Result<Self> {
        if h == 0 || w == 0 || m == 0 {
            return Err(Error::Layout(format!("degenerate layout H={h} W={w} M={m}")));
        }
        if !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::Layout(format!(
                "window size {m} does not divide the {h}x{w} grid"
            )));
        }
        Ok(Self { h, w, m })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    /// Window side `M`.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Windows along the height, `H/M`.
    pub fn hg(&self) -> usize {
        self.h / self.m
    }

    /// Windows along the width, `W/M`.
    pub fn wg(&self) -> usize {
        self.w / self.m
    }

    pub fn num_windows(&self) -> usize {
        self.hg() * self.wg()
    }

    pub fn num_positions(&self) -> usize {
        self.h * self.w
    }

    pub fn is_single_window(&self) -> bool {
        self.m == self.h && self.m == self.w
    }

    pub fn contains(&self, (i, j): (usize, usize)) -> bool {
        i < self.h && j < self.w
    }

    pub fn check(&self, (i, j): (usize, usize)) -> Result<()> {
        if self.contains((i, j)) {
            Ok(())
        } else {
            Err(Error::Bounds {
                i,
                j,
                h: self.h,
                w: self.w,
            })
        }
    }

    /// Where `(i, j)` lands after rearrangement.
    pub fn forward(&self, (i, j): (usize, usize)) -> (usize, usize) {
        let (hg, wg, m) = (self.hg(), self.wg(), self.m);
        ((i % hg) * m + i / hg, (j % wg) * m + j / wg)
    }

    /// Which original position sits at rearranged position `(i', j')`.
    pub fn inverse(&self, (ip, jp): (usize, usize)) -> (usize, usize) {
        let (hg, wg, m) = (self.hg(), self.wg(), self.m);
        ((ip % m) * hg + ip / m, (jp % m) * wg + jp / m)
    }

    /// Window-grid coordinates of the interleaved window holding `(i, j)`.
    pub fn window_of(&self, (i, j): (usize, usize)) -> (usize, usize) {
        (i % self.hg(), j % self.wg())
    }

    /// All positions sharing `(i, j)`'s residues, in row-major order.
    pub fn coset(&self, (i, j): (usize, usize)) -> Vec<(usize, usize)> {
        let (hg, wg) = (self.hg(), self.wg());
        let mut out = Vec::with_capacity(self.m * self.m);
        for a in 0..self.m {
            for b in 0..self.m {
                out.push((i % hg + a * hg, j % wg + b * wg));
            }
        }
        out
    }
}

/// Two tokens attend to each other iff their coordinates agree modulo `(H_g, W_g)`.
pub fn same_window(p1: (usize, usize), p2: (usize, usize), layout: &WindowLayout) -> Result<bool> {
    layout.check(p1)?;
    layout.check(p2)?;
    Ok(layout.window_of(p1) == layout.window_of(p2))
}

/// Forward and inverse position tables for one layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMap {
    pub layout: WindowLayout,
    /// `forward[i·W + j]` is the rearranged position of `(i, j)`.
    pub forward: Vec<(usize, usize)>,
    /// `inverse[i'·W + j']` is the original position at `(i', j')`.
    pub inverse: Vec<(usize, usize)>,
}

impl IndexMap {
    pub fn new(layout: WindowLayout) -> Self {
        let positions = (0..layout.h()).flat_map(|i| (0..layout.w()).map(move |j| (i, j)));
        let forward = positions.clone().map(|p| layout.forward(p)).collect();
        let inverse = positions.map(|p| layout.inverse(p)).collect();
        Self {
            layout,
            forward,
            inverse,
        }
    }

    /// Every grid position is hit exactly once by the forward map.
    pub fn is_bijection(&self) -> bool {
        let w = self.layout.w();
        let mut seen = vec![false; self.forward.len()];
        self.forward
            .iter()
            .all(|&(i, j)| self.layout.contains((i, j)) && !std::mem::replace(&mut seen[i * w + j], true))
    }

    /// `inverse ∘ forward` is the identity on every position.
    pub fn round_trips(&self) -> bool {
        let w = self.layout.w();
        self.forward
            .iter()
            .enumerate()
            .all(|(p, &(i, j))| self.layout.contains((i, j)) && self.inverse[i * w + j] == (p / w, p % w))
    }

    /// Flat gather indices realizing `rearrange`: output slot `p'` reads input `inverse[p']`.
    pub fn rearrange_gather(&self) -> Vec<usize> {
        let w = self.layout.w();
        self.inverse.iter().map(|&(i, j)| i * w + j).collect()
    }

    /// Flat gather indices realizing `restore`.
    pub fn restore_gather(&self) -> Vec<usize> {
        let w = self.layout.w();
        self.forward.iter().map(|&(i, j)| i * w + j).collect()
    }

    /// CSV with one row per position: the forward image of `(i, j)` and the
    /// inverse image of `(i, j)` read as a rearranged coordinate.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,j,fwd_i,fwd_j,inv_i,inv_j\n");
        let w = self.layout.w();
        for (p, (&(fi, fj), &(ii, ij))) in self.forward.iter().zip(&self.inverse).enumerate() {
            let _ = writeln!(out, "{},{},{fi},{fj},{ii},{ij}", p / w, p % w);
        }
        out
    }
}

fn check_map(shape: &[usize], layout: &WindowLayout) -> Result<(usize, usize)> {
    let (b, h, w, c) = feature_dims(shape)?;
    if (h, w) != (layout.h(), layout.w()) {
        return Err(Error::Layout(format!(
            "feature map is {h}x{w} but the layout expects {}x{}",
            layout.h(),
            layout.w()
        )));
    }
    Ok((b, c))
}

/// Interleaving permutation through two reshape-transpose-reshape passes.
pub fn rearrange_var<'t>(x: &Var<'t>, layout: &WindowLayout) -> Result<Var<'t>> {
    let (b, c) = check_map(x.shape(), layout)?;
    let (h, w, m, hg, wg) = (layout.h(), layout.w(), layout.m(), layout.hg(), layout.wg());
    let x = x
        .reshape(&[b, m, hg, w, c])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(&[b, h, w, c])?;
    x.reshape(&[b, h, m, wg, c])?
        .permute(&[0, 1, 3, 2, 4])?
        .reshape(&[b, h, w, c])
}

/// Inverse of [`rearrange_var`], also as two reshape-transpose-reshape passes.
pub fn restore_var<'t>(x: &Var<'t>, layout: &WindowLayout) -> Result<Var<'t>> {
    let (b, c) = check_map(x.shape(), layout)?;
    let (h, w, m, hg, wg) = (layout.h(), layout.w(), layout.m(), layout.hg(), layout.wg());
    let x = x
        .reshape(&[b, h, wg, m, c])?
        .permute(&[0, 1, 3, 2, 4])?
        .reshape(&[b, h, w, c])?;
    x.reshape(&[b, hg, m, w, c])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(&[b, h, w, c])
}

fn gather_positions<'t>(x: &Var<'t>, layout: &WindowLayout, indices: &[usize]) -> Result<Var<'t>> {
    let (b, c) = check_map(x.shape(), layout)?;
    let (h, w) = (layout.h(), layout.w());
    x.reshape(&[b, h * w, c])?.gather(1, indices)?.reshape(&[b, h, w, c])
}

/// Same permutation as [`rearrange_var`], computed by gathering along the
/// closed-form index map.
pub fn rearrange_by_index<'t>(x: &Var<'t>, map: &IndexMap) -> Result<Var<'t>> {
    gather_positions(x, &map.layout, &map.rearrange_gather())
}

pub fn restore_by_index<'t>(x: &Var<'t>, map: &IndexMap) -> Result<Var<'t>> {
    gather_positions(x, &map.layout, &map.restore_gather())
}

/// Tiles a (rearranged) map into `(B·H_g·W_g, M·M, C)`; windows and the
/// tokens inside them are both row-major.
pub fn window_partition_var<'t>(x: &Var<'t>, layout: &WindowLayout) -> Result<Var<'t>> {
    let (b, c) = check_map(x.shape(), layout)?;
    let (m, hg, wg) = (layout.m(), layout.hg(), layout.wg());
    x.reshape(&[b, hg, m, wg, m, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b * hg * wg, m * m, c])
}

pub fn window_merge_var<'t>(windows: &Var<'t>, layout: &WindowLayout) -> Result<Var<'t>> {
    let (m, hg, wg) = (layout.m(), layout.hg(), layout.wg());
    let [rows, tokens, c] = *windows.shape() else {
        return Err(Error::Layout(format!(
            "windows must be (B·Hg·Wg, M·M, C), got {:?}",
            windows.shape()
        )));
    };
    if tokens != m * m || rows % (hg * wg) != 0 {
        return Err(Error::Layout(format!(
            "{rows} windows of {tokens} tokens do not fit a {}x{} grid with M={m}",
            layout.h(),
            layout.w()
        )));
    }
    let b = rows / (hg * wg);
    windows
        .reshape(&[b, hg, wg, m, m, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, layout.h(), layout.w(), c])
}

fn eval(x: &Tensor, f: impl for<'t> Fn(&Var<'t>) -> Result<Var<'t>>) -> Result<Tensor> {
    let tape = Tape::no_grad();
    Ok(f(&tape.leaf(x.clone()))?.into_value())
}

pub fn rearrange(x: &Tensor, layout: &WindowLayout) -> Result<Tensor> {
    eval(x, |v| rearrange_var(v, layout))
}

pub fn restore(x: &Tensor, layout: &WindowLayout) -> Result<Tensor> {
    eval(x, |v| restore_var(v, layout))
}

pub fn window_partition(x: &Tensor, layout: &WindowLayout) -> Result<Tensor> {
    eval(x, |v| window_partition_var(v, layout))
}

pub fn window_merge(windows: &Tensor, layout: &WindowLayout) -> Result<Tensor> {
    eval(windows, |v| window_merge_var(v, layout))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Channel 0 carries the flat index `i·W + j` of each token.
    fn tagged(layout: &WindowLayout, batch: usize, channels: usize) -> Tensor {
        let (h, w) = (layout.h(), layout.w());
        Tensor::from_fn(&[batch, h, w, channels], |flat| {
            let pos = (flat / channels) % (h * w);
            let ch = flat % channels;
            (pos * channels + ch) as f64 + (flat / (channels * h * w)) as f64 * 1e4
        })
    }

    fn tag_at(t: &Tensor, b: usize, i: usize, j: usize, c: usize) -> usize {
        (t.get(&[b, i, j, 0]) as usize % 10_000) / c
    }

    #[test]
    fn single_window_and_unit_window_are_identity() {
        for layout in [WindowLayout::new(4, 4, 4).unwrap(), WindowLayout::new(5, 3, 1).unwrap()] {
            let x = tagged(&layout, 1, 2);
            assert!(rearrange(&x, &layout).unwrap().bit_eq(&x));
            assert!(restore(&x, &layout).unwrap().bit_eq(&x));
        }
    }

    #[test]
    fn four_by_four_window_two_row_map() {
        let layout = WindowLayout::new(4, 4, 2).unwrap();
        let rows: Vec<usize> = (0..4).map(|i| layout.forward((i, 0)).0).collect();
        assert_eq!(rows, vec![0, 2, 1, 3]);
        assert_eq!(layout.forward((1, 2)), (2, 1));
        assert_eq!(layout.inverse((2, 0)).0, 1);
        let x = tagged(&layout, 1, 1);
        let r = rearrange(&x, &layout).unwrap();
        assert_eq!(tag_at(&r, 0, 2, 1, 1), 4 + 2);
    }

    #[test]
    fn window_zero_holds_even_coordinates() {
        let layout = WindowLayout::new(4, 4, 2).unwrap();
        let x = tagged(&layout, 1, 1);
        let wins = window_partition(&rearrange(&x, &layout).unwrap(), &layout).unwrap();
        assert_eq!(wins.shape(), &[4, 4, 1]);
        let mut got: Vec<usize> = (0..4).map(|t| wins.get(&[0, t, 0]) as usize).collect();
        got.sort();
        let expect: Vec<usize> = [(0, 0), (0, 2), (2, 0), (2, 2)]
            .iter()
            .map(|&(i, j)| i * 4 + j)
            .collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn partition_of_single_window_is_row_major() {
        let layout = WindowLayout::new(3, 3, 3).unwrap();
        let x = tagged(&layout, 1, 1);
        let wins = window_partition(&x, &layout).unwrap();
        assert_eq!(wins.shape(), &[1, 9, 1]);
        assert_eq!(wins.data(), x.data());
    }

    #[test]
    fn merge_inverts_partition_on_rectangular_grid() {
        let layout = WindowLayout::new(6, 4, 2).unwrap();
        let x = tagged(&layout, 2, 3);
        let wins = window_partition(&x, &layout).unwrap();
        assert_eq!(wins.shape(), &[2 * 3 * 2, 4, 3]);
        // Exhaustive position check: window (wr, wc), token (a, b) is (wr·M + a, wc·M + b).
        for wr in 0..3 {
            for wc in 0..2 {
                for a in 0..2 {
                    for b in 0..2 {
                        let got = wins.get(&[wr * 2 + wc, a * 2 + b, 0]) as usize / 3;
                        assert_eq!(got, (wr * 2 + a) * 4 + wc * 2 + b);
                    }
                }
            }
        }
        assert!(window_merge(&wins, &layout).unwrap().bit_eq(&x));
        assert!(window_merge(&Tensor::zeros(&[5, 4, 3]), &layout).is_err());
    }

    #[test]
    fn indivisible_layout_rejected() {
        assert!(matches!(WindowLayout::new(6, 6, 4), Err(Error::Layout(_))));
        let layout = WindowLayout::new(4, 4, 2).unwrap();
        assert!(rearrange(&Tensor::zeros(&[1, 6, 4, 1]), &layout).is_err());
    }

    #[test]
    fn same_window_examples() {
        let layout = WindowLayout::new(8, 8, 2).unwrap();
        assert!(same_window((3, 5), (3, 5), &layout).unwrap());
        assert!(same_window((0, 0), (4, 4), &layout).unwrap());
        assert!(!same_window((0, 0), (1, 0), &layout).unwrap());
        assert!(matches!(
            same_window((8, 0), (0, 0), &layout),
            Err(Error::Bounds { .. })
        ));
    }

    #[test]
    fn same_window_matches_tagged_membership() {
        for h in 1..=8 {
            for w in 1..=8 {
                for m in (1..=h.min(w)).filter(|m| h % m == 0 && w % m == 0) {
                    let layout = WindowLayout::new(h, w, m).unwrap();
                    let x = tagged(&layout, 1, 1);
                    let wins = window_partition(&rearrange(&x, &layout).unwrap(), &layout).unwrap();
                    let mut window_id = vec![0; h * w];
                    for win in 0..layout.num_windows() {
                        for t in 0..m * m {
                            window_id[wins.get(&[win, t, 0]) as usize] = win;
                        }
                    }
                    for p in 0..h * w {
                        for q in 0..h * w {
                            let lemma = same_window((p / w, p % w), (q / w, q % w), &layout).unwrap();
                            assert_eq!(lemma, window_id[p] == window_id[q], "{h}x{w} M={m} {p} {q}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn index_path_matches_reshape_path() {
        let layout = WindowLayout::new(6, 9, 3).unwrap();
        let map = IndexMap::new(layout);
        assert!(map.is_bijection() && map.round_trips());
        let x = tagged(&layout, 2, 2);
        let tape = Tape::no_grad();
        let v = tape.leaf(x.clone());
        let fast = rearrange_var(&v, &layout).unwrap();
        let slow = rearrange_by_index(&v, &map).unwrap();
        assert!(fast.value().bit_eq(slow.value()));
        let back = restore_by_index(&slow, &map).unwrap();
        assert!(back.value().bit_eq(&x));
    }

    #[test]
    fn csv_dump_has_one_row_per_position() {
        let map = IndexMap::new(WindowLayout::new(4, 4, 2).unwrap());
        let csv = map.to_csv();
        assert_eq!(csv.lines().count(), 17);
        assert!(csv.lines().any(|l| l == "1,2,2,1,2,1"));
    }

    fn layouts() -> impl Strategy<Value = WindowLayout> {
        (1usize..=4, 1usize..=4, 1usize..=3).prop_map(|(hg, wg, m)| WindowLayout::new(hg * m, wg * m, m).unwrap())
    }

    proptest! {
        #[test]
        fn restore_inverts_rearrange(layout in layouts(), c in 1usize..4, seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[2, layout.h(), layout.w(), c], 1.0, &mut rng);
            let r = rearrange(&x, &layout).unwrap();
            prop_assert!(restore(&r, &layout).unwrap().bit_eq(&x));
            prop_assert!(rearrange(&restore(&x, &layout).unwrap(), &layout).unwrap().bit_eq(&x));
        }

        #[test]
        fn permutation_commutes_with_channel_maps(layout in layouts(), seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[1, layout.h(), layout.w(), 3], 1.0, &mut rng);
            let f = |v: f64| v.tanh() * 2.0 - 0.5;
            let a = rearrange(&x.map(f), &layout).unwrap();
            let b = rearrange(&x, &layout).unwrap().map(f);
            prop_assert!(a.bit_eq(&b));
        }
    }
}
