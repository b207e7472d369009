//! Patch bags and their soft labels.
//!
//! An image is cut into `n` non-overlapping `p × p` patches in row-major
//! scan order. Each patch carries a [`PatchLabel`]: the fraction of masked
//! pixels, attributed entirely to the patch's dominant category. A bag's
//! soft label is the plain sum of its members' patch labels.
//!
//! Two distributors turn a batch of bags into model inputs: the MIL
//! distributor applies one seeded permutation across every patch slot of
//! the batch, the CLS distributor passes bags through untouched.

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Mask category that makes an image positive.
pub const POSITIVE_CATEGORY: u8 = 1;

/// An image with its pixel-level category mask and image-level class.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: u64,
    pub pixels: Image,
    pub mask: Mask,
    pub class_label: u8,
}

impl LabeledImage {
    pub fn new(id: u64, pixels: Image, mask: Mask) -> Result<Self> {
        if pixels.height != mask.height || pixels.width != mask.width {
            return Err(Error::ImageFormat(format!(
                "pixels {}x{} and mask {}x{} differ",
                pixels.height, pixels.width, mask.height, mask.width
            )));
        }
        let class_label = derive_bag_label(&mask);
        Ok(Self {
            id,
            pixels,
            mask,
            class_label,
        })
    }
}

/// Masked-pixel ratio of one patch and its per-category split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchLabel {
    pub mr: f64,
    /// `per_category[j - 1]` is the ratio credited to category `j`.
    pub per_category: Vec<f64>,
}

impl PatchLabel {
    /// The category credited with this patch's masked ratio, if any.
    pub fn category(&self) -> Option<usize> {
        self.per_category
            .iter()
            .position(|&v| v != 0.0)
            .map(|i| i + 1)
    }
}

/// Where a patch slot came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Provenance {
    pub image_id: u64,
    pub slot: usize,
}

/// An ordered sequence of `n` patches with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub patch_side: usize,
    pub channels: usize,
    pub patches: Vec<Vec<f32>>,
    pub labels: Vec<PatchLabel>,
    pub provenance: Vec<Provenance>,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn soft_label(&self) -> BagSoftLabel {
        BagSoftLabel::from_labels(&self.labels)
    }
}

/// Sum of the member patch labels of a bag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagSoftLabel {
    pub total: f64,
    pub per_category: Vec<f64>,
}

impl BagSoftLabel {
    pub fn from_labels(labels: &[PatchLabel]) -> Self {
        let k = labels.first().map_or(0, |l| l.per_category.len());
        let mut per_category = vec![0.0; k];
        let mut total = 0.0;
        for l in labels {
            total += l.mr;
            for (acc, v) in per_category.iter_mut().zip(&l.per_category) {
                *acc += v;
            }
        }
        Self {
            total,
            per_category,
        }
    }

    /// `[total, per_category...]`, the layout regressed by the MIL head.
    pub fn to_vec(&self) -> Vec<f64> {
        std::iter::once(self.total)
            .chain(self.per_category.iter().copied())
            .collect()
    }
}

/// Labels a mask patch: masked ratio plus dominant-category attribution.
///
/// A patch holding several categories is credited to the one with the most
/// pixels; ties go to the smaller category index.
pub fn compute_patch_label(mask_patch: &[u8], categories: usize) -> Result<PatchLabel> {
    let mut counts = vec![0usize; categories + 1];
    for &c in mask_patch {
        if c as usize > categories {
            return Err(Error::CategoryOutOfRange {
                found: c,
                max: categories,
            });
        }
        counts[c as usize] += 1;
    }
    let masked: usize = counts[1..].iter().sum();
    let mr = if mask_patch.is_empty() {
        0.0
    } else {
        masked as f64 / mask_patch.len() as f64
    };
    let mut per_category = vec![0.0; categories];
    if masked > 0 {
        // max_by_key keeps the last maximum, so scan from the highest index down
        let k = (1..=categories)
            .rev()
            .max_by_key(|&j| counts[j])
            .expect("categories >= 1 when masked > 0");
        per_category[k - 1] = mr;
    }
    Ok(PatchLabel { mr, per_category })
}

/// Image-level label: positive iff any pixel carries the positive category.
pub fn derive_bag_label(mask: &Mask) -> u8 {
    u8::from(mask.data.contains(&POSITIVE_CATEGORY))
}

/// Splits an image and its mask into `(side / p)²` row-major patches.
pub fn split_into_patches(img: &LabeledImage, patch_side: usize, categories: usize) -> Result<Bag> {
    let px = &img.pixels;
    if px.height != px.width || patch_side == 0 || px.height % patch_side != 0 {
        return Err(Error::PatchSize {
            image_side: px.height.max(px.width),
            patch_side,
        });
    }
    let grid = px.height / patch_side;
    let c = px.channels;
    let mut patches = Vec::with_capacity(grid * grid);
    let mut labels = Vec::with_capacity(grid * grid);
    let mut provenance = Vec::with_capacity(grid * grid);
    let mut mask_patch = Vec::with_capacity(patch_side * patch_side);
    for gy in 0..grid {
        for gx in 0..grid {
            let mut patch = Vec::with_capacity(patch_side * patch_side * c);
            mask_patch.clear();
            for y in gy * patch_side..(gy + 1) * patch_side {
                let row = px.idx(y, gx * patch_side);
                patch.extend_from_slice(&px.data[row..row + patch_side * c]);
                let mrow = y * img.mask.width + gx * patch_side;
                mask_patch.extend_from_slice(&img.mask.data[mrow..mrow + patch_side]);
            }
            labels.push(compute_patch_label(&mask_patch, categories)?);
            provenance.push(Provenance {
                image_id: img.id,
                slot: patches.len(),
            });
            patches.push(patch);
        }
    }
    Ok(Bag {
        patch_side,
        channels: c,
        patches,
        labels,
        provenance,
    })
}

/// Reassembles a bag into an image, the inverse of [`split_into_patches`].
pub fn compose_bag(bag: &Bag, image_side: usize) -> Result<Image> {
    let p = bag.patch_side;
    if p == 0 || image_side % p != 0 || (image_side / p).pow(2) != bag.len() {
        return Err(Error::BagMismatch(format!(
            "{} patches of side {p} cannot tile a {image_side}x{image_side} image",
            bag.len()
        )));
    }
    let grid = image_side / p;
    let c = bag.channels;
    let mut img = Image::filled(image_side, image_side, c, 0.0);
    for (i, patch) in bag.patches.iter().enumerate() {
        if patch.len() != p * p * c {
            return Err(Error::BagMismatch(format!(
                "patch {i} has {} values, expected {}",
                patch.len(),
                p * p * c
            )));
        }
        let (gy, gx) = (i / grid, i % grid);
        for r in 0..p {
            let dst = img.idx(gy * p + r, gx * p);
            img.data[dst..dst + p * c].copy_from_slice(&patch[r * p * c..(r + 1) * p * c]);
        }
    }
    Ok(img)
}

/// The permutation applied by the MIL distributor to one batch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShufflePlan {
    pub seed: u64,
    #[serde(rename = "B")]
    pub bags: usize,
    pub n: usize,
    /// `[dst_bag, dst_slot, src_bag, src_slot]`, ordered by destination.
    pub mapping: Vec<[usize; 4]>,
}

impl ShufflePlan {
    pub fn identity(seed: u64, bags: usize, n: usize) -> Self {
        Self::from_sources(seed, bags, n, &(0..bags * n).collect::<Vec<_>>())
    }

    fn from_sources(seed: u64, bags: usize, n: usize, sources: &[usize]) -> Self {
        let mapping = sources
            .iter()
            .enumerate()
            .map(|(dst, &src)| [dst / n, dst % n, src / n, src % n])
            .collect();
        Self {
            seed,
            bags,
            n,
            mapping,
        }
    }

    /// True iff the mapping covers every destination and every source once.
    pub fn is_bijection(&self) -> bool {
        let total = self.bags * self.n;
        if self.mapping.len() != total {
            return false;
        }
        let mut seen_dst = vec![false; total];
        let mut seen_src = vec![false; total];
        for &[db, ds, sb, ss] in &self.mapping {
            if db >= self.bags || sb >= self.bags || ds >= self.n || ss >= self.n {
                return false;
            }
            let (d, s) = (db * self.n + ds, sb * self.n + ss);
            if seen_dst[d] || seen_src[s] {
                return false;
            }
            seen_dst[d] = true;
            seen_src[s] = true;
        }
        true
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Replays the plan on a batch.
    pub fn apply(&self, batch: &[Bag]) -> Result<Vec<Bag>> {
        check_batch(batch)?;
        if batch.len() != self.bags || batch[0].len() != self.n || !self.is_bijection() {
            return Err(Error::BagMismatch(format!(
                "plan for {}x{} slots does not fit a batch of {}x{}",
                self.bags,
                self.n,
                batch.len(),
                batch[0].len()
            )));
        }
        let mut out: Vec<Bag> = batch
            .iter()
            .map(|b| Bag {
                patch_side: b.patch_side,
                channels: b.channels,
                patches: Vec::with_capacity(self.n),
                labels: Vec::with_capacity(self.n),
                provenance: Vec::with_capacity(self.n),
            })
            .collect();
        for &[db, _, sb, ss] in &self.mapping {
            let src = &batch[sb];
            let dst = &mut out[db];
            dst.patches.push(src.patches[ss].clone());
            dst.labels.push(src.labels[ss].clone());
            dst.provenance.push(src.provenance[ss]);
        }
        Ok(out)
    }
}

fn check_batch(batch: &[Bag]) -> Result<()> {
    let first = batch
        .first()
        .ok_or_else(|| Error::BagMismatch("empty batch".into()))?;
    for (i, b) in batch.iter().enumerate() {
        if b.len() != first.len()
            || b.patch_side != first.patch_side
            || b.channels != first.channels
        {
            return Err(Error::BagMismatch(format!(
                "bag {i} has n={} p={} c={}, bag 0 has n={} p={} c={}",
                b.len(),
                b.patch_side,
                b.channels,
                first.len(),
                first.patch_side,
                first.channels
            )));
        }
        if b.labels.len() != b.len() || b.provenance.len() != b.len() {
            return Err(Error::BagMismatch(format!(
                "bag {i} has mismatched patch/label/provenance counts"
            )));
        }
    }
    Ok(())
}

/// Output of a distributor: bags to compose, their soft labels, and the
/// permutation that produced them.
#[derive(Clone, Debug)]
pub struct Distributed {
    pub bags: Vec<Bag>,
    pub soft_labels: Vec<BagSoftLabel>,
    pub plan: ShufflePlan,
}

/// MIL distributor: one seeded permutation over all `B·n` patch slots.
pub fn mil_distribute(batch: &[Bag], seed: u64) -> Result<Distributed> {
    mil_distribute_with(batch, seed, true)
}

/// MIL distributor with the shuffle switchable; with `shuffle == false`
/// the output is identical to [`cls_distribute`].
pub fn mil_distribute_with(batch: &[Bag], seed: u64, shuffle: bool) -> Result<Distributed> {
    check_batch(batch)?;
    let (b, n) = (batch.len(), batch[0].len());
    let plan = if shuffle {
        let mut sources: Vec<usize> = (0..b * n).collect();
        sources.shuffle(&mut rng::rng_from_seed(seed));
        ShufflePlan::from_sources(seed, b, n, &sources)
    } else {
        ShufflePlan::identity(seed, b, n)
    };
    let bags = plan.apply(batch)?;
    let soft_labels = bags.iter().map(Bag::soft_label).collect();
    Ok(Distributed {
        bags,
        soft_labels,
        plan,
    })
}

/// CLS distributor: bags pass through unchanged.
pub fn cls_distribute(batch: &[Bag]) -> Result<(Vec<Bag>, Vec<BagSoftLabel>)> {
    check_batch(batch)?;
    let labels = batch.iter().map(Bag::soft_label).collect();
    Ok((batch.to_vec(), labels))
}
