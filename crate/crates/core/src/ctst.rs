//! Cross-temporal style transformation: region statistics of one temporal
//! image are transplanted onto another, leaving pixel positions (and so the
//! change mask) untouched.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{self, ChannelStats, RegionGrid};
use crate::tensor::Tensor;
use crate::Real;

/// Regularizer for image-space statistics.
pub const IMAGE_EPS: f64 = 1e-8;

pub const DEFAULT_LAMBDA_PRIME: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StyleMode {
    UstAtoB,
    UstBtoA,
    Bst,
    Ibst,
}

impl StyleMode {
    pub const ALL: [StyleMode; 4] = [
        StyleMode::UstAtoB,
        StyleMode::UstBtoA,
        StyleMode::Bst,
        StyleMode::Ibst,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            StyleMode::UstAtoB => "ust-ab",
            StyleMode::UstBtoA => "ust-ba",
            StyleMode::Bst => "bst",
            StyleMode::Ibst => "ibst",
        }
    }
}

impl fmt::Display for StyleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for StyleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StyleMode::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| {
                Error::invalid("style_mode", format!("unknown mode `{s}` (ust-ab, ust-ba, bst, ibst)"))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UstDirection {
    AtoB,
    BtoA,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StylizedPair<T> {
    pub xa: Tensor<T>,
    pub xb: Tensor<T>,
    pub mode: StyleMode,
    pub donor_id: Option<usize>,
}

fn plane_dims<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match x.shape() {
        &[c, h, w] | &[1, c, h, w] => Ok((c, h, w)),
        s => Err(Error::invalid("ctst", format!("expected C x H x W image, got {s:?}"))),
    }
}

fn map_regions<T: Real>(
    x: &Tensor<T>,
    grid: &RegionGrid,
    mut f: impl FnMut(usize, usize, T) -> T,
) -> Result<Tensor<T>> {
    let (c, h, w) = plane_dims(x)?;
    if (h, w) != (grid.height, grid.width) {
        return Err(Error::invalid(
            "ctst",
            format!("grid is {}x{}, image is {h}x{w}", grid.height, grid.width),
        ));
    }
    let mut out = x.data().to_vec();
    for (r, b) in grid.boxes.iter().enumerate() {
        for ch in 0..c {
            for o in b.offsets(w) {
                let k = ch * h * w + o;
                out[k] = f(r, ch, out[k]);
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Per region and channel `(x - mu) / sqrt(var + eps)`, with the statistics used.
pub fn normalize_local_image<T: Real>(
    x: &Tensor<T>,
    grid: &RegionGrid,
    eps: T,
) -> Result<(Tensor<T>, ChannelStats<T>)> {
    let st = stats::region_channel_stats(x, grid, eps)?;
    let inv: Vec<T> = st.var.iter().map(|&v| T::one() / v.sqrt()).collect();
    let c = st.channels;
    let xbar = map_regions(x, grid, |r, ch, v| (v - st.mu[r * c + ch]) * inv[r * c + ch])?;
    Ok((xbar, st))
}

/// Rescales a normalized image to the donor's region statistics:
/// `xbar * sqrt(var + eps) + mu`, the inverse of `normalize_local_image`.
pub fn restyle<T: Real>(xbar: &Tensor<T>, donor: &ChannelStats<T>, grid: &RegionGrid) -> Result<Tensor<T>> {
    let (c, _, _) = plane_dims(xbar)?;
    if donor.regions != grid.len() || donor.channels != c {
        return Err(Error::invalid(
            "restyle",
            format!(
                "donor stats cover {} regions x {} channels, need {} x {c}",
                donor.regions,
                donor.channels,
                grid.len()
            ),
        ));
    }
    let sd: Vec<T> = (0..donor.regions)
        .flat_map(|r| (0..c).map(move |ch| donor.variance(r, ch).sqrt()))
        .collect();
    map_regions(xbar, grid, |r, ch, v| v * sd[r * c + ch] + donor.mu[r * c + ch])
}

fn check_same<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ctst pair", a.shape(), b.shape()));
    }
    Ok(())
}

/// Restyles one side with the co-located region statistics of the other.
pub fn ust<T: Real>(
    xa: &Tensor<T>,
    xb: &Tensor<T>,
    dir: UstDirection,
    grid: &RegionGrid,
    eps: T,
) -> Result<StylizedPair<T>> {
    check_same(xa, xb)?;
    let (src, donor) = match dir {
        UstDirection::AtoB => (xa, xb),
        UstDirection::BtoA => (xb, xa),
    };
    let (xbar, _) = normalize_local_image(src, grid, eps)?;
    let donor_stats = stats::region_channel_stats(donor, grid, eps)?;
    let out = restyle(&xbar, &donor_stats, grid)?;
    Ok(match dir {
        UstDirection::AtoB => StylizedPair {
            xa: out,
            xb: xb.clone(),
            mode: StyleMode::UstAtoB,
            donor_id: None,
        },
        UstDirection::BtoA => StylizedPair {
            xa: xa.clone(),
            xb: out,
            mode: StyleMode::UstBtoA,
            donor_id: None,
        },
    })
}

/// Swaps the region statistics of both sides.
pub fn bst<T: Real>(xa: &Tensor<T>, xb: &Tensor<T>, grid: &RegionGrid, eps: T) -> Result<StylizedPair<T>> {
    check_same(xa, xb)?;
    let (na, sa) = normalize_local_image(xa, grid, eps)?;
    let (nb, sb) = normalize_local_image(xb, grid, eps)?;
    Ok(StylizedPair {
        xa: restyle(&na, &sb, grid)?,
        xb: restyle(&nb, &sa, grid)?,
        mode: StyleMode::Bst,
        donor_id: None,
    })
}

/// Restyles A with C's statistics and B with D's, where `(xc, xd)` is another pair.
pub fn ibst<T: Real>(
    xa: &Tensor<T>,
    xb: &Tensor<T>,
    xc: &Tensor<T>,
    xd: &Tensor<T>,
    donor_id: usize,
    grid: &RegionGrid,
    eps: T,
) -> Result<StylizedPair<T>> {
    check_same(xa, xb)?;
    check_same(xa, xc)?;
    check_same(xa, xd)?;
    let (na, _) = normalize_local_image(xa, grid, eps)?;
    let (nb, _) = normalize_local_image(xb, grid, eps)?;
    let sc = stats::region_channel_stats(xc, grid, eps)?;
    let sd = stats::region_channel_stats(xd, grid, eps)?;
    Ok(StylizedPair {
        xa: restyle(&na, &sc, grid)?,
        xb: restyle(&nb, &sd, grid)?,
        mode: StyleMode::Ibst,
        donor_id: Some(donor_id),
    })
}

/// UST, BST and IBST with probability 1/3 each; UST direction 1/2 each.
pub fn sample_mode<R: Rng + ?Sized>(rng: &mut R) -> StyleMode {
    match rng.random_range(0..3) {
        0 => {
            if rng.random_bool(0.5) {
                StyleMode::UstAtoB
            } else {
                StyleMode::UstBtoA
            }
        }
        1 => StyleMode::Bst,
        _ => StyleMode::Ibst,
    }
}

/// Applies `mode` to pair `i` of a batch; IBST takes the next pair
/// (cyclically) as donor.
pub fn stylize_in_batch<T: Real>(
    xa: &[Tensor<T>],
    xb: &[Tensor<T>],
    i: usize,
    mode: StyleMode,
    lambda_prime: usize,
    eps: T,
) -> Result<StylizedPair<T>> {
    let (_, h, w) = plane_dims(&xa[i])?;
    let grid = stats::make_grid(h, w, lambda_prime)?;
    match mode {
        StyleMode::UstAtoB => ust(&xa[i], &xb[i], UstDirection::AtoB, &grid, eps),
        StyleMode::UstBtoA => ust(&xa[i], &xb[i], UstDirection::BtoA, &grid, eps),
        StyleMode::Bst => bst(&xa[i], &xb[i], &grid, eps),
        StyleMode::Ibst => {
            let j = (i + 1) % xa.len();
            ibst(&xa[i], &xb[i], &xa[j], &xb[j], j, &grid, eps)
        }
    }
}
