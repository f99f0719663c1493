//! Semantic parse maps and the binary editable-region masks derived from them.
//!
//! A mask value of 1 marks pixels the sampler may regenerate; 0 marks pixels
//! that are preserved (background, hair, accessories, kept facial regions).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Shape};

/// Number of semantic classes produced by the face parser.
pub const NUM_LABELS: usize = 19;

/// Default label names, indexed by label value.
pub const DEFAULT_LABEL_NAMES: [&str; NUM_LABELS] = [
    "background",
    "skin",
    "l_brow",
    "r_brow",
    "l_eye",
    "r_eye",
    "eye_g",
    "l_ear",
    "r_ear",
    "ear_r",
    "nose",
    "mouth",
    "u_lip",
    "l_lip",
    "neck",
    "neck_l",
    "cloth",
    "hair",
    "hat",
];

const DEFAULT_FACE: [&str; 9] = [
    "skin", "l_brow", "r_brow", "l_eye", "r_eye", "nose", "mouth", "u_lip", "l_lip",
];

const DEFAULT_REGIONS: [(&str, &[&str]); 4] = [
    ("eyes", &["l_eye", "r_eye"]),
    ("lips", &["u_lip", "l_lip", "mouth"]),
    ("nose", &["nose"]),
    ("eyebrows", &["l_brow", "r_brow"]),
];

/// Names → label indices, the editable face set and the keepable regions.
///
/// Serialized as TOML:
///
/// ```toml
/// face = ["skin", "nose"]
///
/// [labels]
/// background = 0
/// skin = 1
/// nose = 10
///
/// [regions]
/// nose = ["nose"]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMap {
    pub face: Vec<String>,
    pub labels: BTreeMap<String, u8>,
    pub regions: BTreeMap<String, Vec<String>>,
}

impl Default for LabelMap {
    fn default() -> Self {
        Self {
            face: DEFAULT_FACE.iter().map(|s| s.to_string()).collect(),
            labels: DEFAULT_LABEL_NAMES
                .iter()
                .enumerate()
                .map(|(i, n)| (n.to_string(), i as u8))
                .collect(),
            regions: DEFAULT_REGIONS
                .iter()
                .map(|(r, ls)| (r.to_string(), ls.iter().map(|s| s.to_string()).collect()))
                .collect(),
        }
    }
}

impl LabelMap {
    pub fn from_toml(text: &str) -> Result<Self> {
        let map: LabelMap =
            toml::from_str(text).map_err(|e| Error::invalid(format!("label map: {e}")))?;
        map.validate()?;
        Ok(map)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("label map serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((n, i)) = self.labels.iter().find(|(_, i)| **i as usize >= NUM_LABELS) {
            return Err(Error::invalid(format!(
                "label `{n}` has index {i} >= {NUM_LABELS}"
            )));
        }
        self.face_labels()?;
        for region in self.regions.keys() {
            self.region_labels(region)?;
        }
        Ok(())
    }

    pub fn index(&self, name: &str) -> Result<u8> {
        self.labels
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown label `{name}`")))
    }

    fn label_set<'a>(
        &self,
        names: impl IntoIterator<Item = &'a String>,
    ) -> Result<[bool; NUM_LABELS]> {
        let mut set = [false; NUM_LABELS];
        for name in names {
            set[self.index(name)? as usize] = true;
        }
        Ok(set)
    }

    /// Membership table of labels forming the editable face.
    pub fn face_labels(&self) -> Result<[bool; NUM_LABELS]> {
        self.label_set(&self.face)
    }

    /// Labels covered by a named region; the region must be known and nonempty.
    pub fn region_labels(&self, region: &str) -> Result<[bool; NUM_LABELS]> {
        let names = self
            .regions
            .get(region)
            .ok_or_else(|| Error::UnknownRegion(region.to_string()))?;
        let set = self.label_set(names)?;
        if !set.iter().any(|b| *b) {
            return Err(Error::invalid(format!(
                "region `{region}` resolves to no labels"
            )));
        }
        Ok(set)
    }
}

/// Facial regions to leave untouched during localized anonymization.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegionSet(BTreeSet<String>);

impl RegionSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new<I, S>(regions: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self(
            regions
                .into_iter()
                .map(|s| s.as_ref().trim().to_lowercase())
                .collect(),
        )
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn to_vec(&self) -> Vec<String> {
        self.0.iter().cloned().collect()
    }

    /// Union of the labels of every region, failing on the first unknown one.
    pub fn resolve(&self, label_map: &LabelMap) -> Result<[bool; NUM_LABELS]> {
        let mut set = [false; NUM_LABELS];
        for region in &self.0 {
            for (acc, hit) in set.iter_mut().zip(label_map.region_labels(region)?) {
                *acc |= hit;
            }
        }
        Ok(set)
    }
}

impl FromStr for RegionSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(Self::new(
            s.split(',').map(str::trim).filter(|r| !r.is_empty()),
        ))
    }
}

impl fmt::Display for RegionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.iter().collect();
        f.write_str(&names.join(","))
    }
}

/// Per-pixel semantic labels in `0..19`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseMap {
    labels: Grid<u8>,
}

impl ParseMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        Self::from_grid(Grid::new(Shape::plane(height, width), labels)?)
    }

    pub fn from_grid(labels: Grid<u8>) -> Result<Self> {
        if labels.shape().channels != 1 {
            return Err(Error::InvalidParseMap(
                "parse map must have one channel".into(),
            ));
        }
        if let Some(v) = labels
            .as_slice()
            .iter()
            .find(|v| **v as usize >= NUM_LABELS)
        {
            return Err(Error::InvalidParseMap(format!(
                "label {v} outside 0..{NUM_LABELS}"
            )));
        }
        Ok(Self { labels })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Result<Self> {
        Self::new(height, width, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.labels.shape().height
    }

    pub fn width(&self) -> usize {
        self.labels.shape().width
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        *self.labels.get(0, y, x)
    }

    pub fn labels(&self) -> &Grid<u8> {
        &self.labels
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_raw(
            self.width() as u32,
            self.height() as u32,
            self.labels.as_slice().to_vec(),
        )
        .expect("buffer matches dimensions")
    }

    pub fn from_gray_image(img: &GrayImage) -> Result<Self> {
        Self::new(
            img.height() as usize,
            img.width() as usize,
            img.as_raw().clone(),
        )
    }

    fn mask_where(&self, member: impl Fn(u8) -> bool) -> FaceMask {
        FaceMask {
            mask: self.labels.map(|l| member(*l) as u8),
        }
    }
}

/// Binary editable-region mask: 1 = regenerate, 0 = preserve.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceMask {
    mask: Grid<u8>,
}

impl FaceMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.iter().any(|v| *v > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(Self {
            mask: Grid::new(Shape::plane(height, width), values)?,
        })
    }

    pub fn filled(height: usize, width: usize, editable: bool) -> Self {
        Self {
            mask: Grid::filled(Shape::plane(height, width), editable as u8),
        }
    }

    pub fn height(&self) -> usize {
        self.mask.shape().height
    }

    pub fn width(&self) -> usize {
        self.mask.shape().width
    }

    pub fn shape(&self) -> Shape {
        self.mask.shape()
    }

    pub fn is_editable(&self, y: usize, x: usize) -> bool {
        *self.mask.get(0, y, x) == 1
    }

    pub fn values(&self) -> &[u8] {
        self.mask.as_slice()
    }

    pub fn editable_count(&self) -> usize {
        self.mask.as_slice().iter().filter(|v| **v == 1).count()
    }

    pub fn editable_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.editable_count() as f64 / self.mask.len() as f64
    }

    /// Pointwise `self <= other`.
    pub fn is_subset_of(&self, other: &FaceMask) -> bool {
        self.shape() == other.shape()
            && self
                .values()
                .iter()
                .zip(other.values())
                .all(|(a, b)| a <= b)
    }

    /// Grow the editable region by a square structuring element of the given radius.
    pub fn dilate(&self, radius: usize) -> FaceMask {
        if radius == 0 {
            return self.clone();
        }
        let (h, w) = (self.height(), self.width());
        let mask = Grid::from_fn(self.shape(), |_, y, x| {
            let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(h - 1));
            let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(w - 1));
            (y0..=y1).any(|yy| (x0..=x1).any(|xx| self.is_editable(yy, xx))) as u8
        });
        FaceMask { mask }
    }

    fn subtract(&self, parse: &ParseMap, drop: &[bool; NUM_LABELS]) -> FaceMask {
        let mask = self
            .mask
            .zip_map(parse.labels(), |m, l| m * (!drop[*l as usize]) as u8)
            .expect("mask and parse map share a shape");
        FaceMask { mask }
    }

    /// 0/255 single-channel image.
    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_raw(
            self.width() as u32,
            self.height() as u32,
            self.values().iter().map(|v| v * 255).collect(),
        )
        .expect("buffer matches dimensions")
    }

    pub fn from_gray_image(img: &GrayImage) -> Result<Self> {
        let values = img
            .as_raw()
            .iter()
            .map(|v| match v {
                0 => Ok(0),
                255 => Ok(1),
                other => Err(Error::invalid(format!(
                    "mask pixel {other} is not 0 or 255"
                ))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(img.height() as usize, img.width() as usize, values)
    }

    fn check_plane(&self, shape: Shape) -> Result<()> {
        if shape.height != self.height() || shape.width != self.width() {
            return Err(Error::ShapeMismatch {
                expected: Shape::new(shape.channels, self.height(), self.width()),
                found: shape,
            });
        }
        Ok(())
    }
}

/// M: every pixel whose label belongs to the face set.
pub fn full_face_mask(parse: &ParseMap, label_map: &LabelMap) -> Result<FaceMask> {
    let face = label_map.face_labels()?;
    Ok(parse.mask_where(|l| face[l as usize]))
}

/// M′: the full-face mask minus every pixel belonging to a kept region.
pub fn localized_mask(
    parse: &ParseMap,
    keep: &RegionSet,
    label_map: &LabelMap,
) -> Result<FaceMask> {
    let drop = keep.resolve(label_map)?;
    Ok(full_face_mask(parse, label_map)?.subtract(parse, &drop))
}

/// Full or localized mask with optional dilation of the face region.
///
/// Kept regions are subtracted after dilation so they stay untouched.
pub fn build_mask(
    parse: &ParseMap,
    keep: &RegionSet,
    label_map: &LabelMap,
    dilation: usize,
) -> Result<FaceMask> {
    let drop = keep.resolve(label_map)?;
    Ok(full_face_mask(parse, label_map)?
        .dilate(dilation)
        .subtract(parse, &drop))
}

/// x ⊙ (1 − M): zero out the editable region in every channel.
pub fn apply_mask<T: Copy + Default>(image: &Grid<T>, mask: &FaceMask) -> Result<Grid<T>> {
    let shape = image.shape();
    mask.check_plane(shape)?;
    Ok(Grid::from_fn(shape, |c, y, x| {
        if mask.is_editable(y, x) {
            T::default()
        } else {
            *image.get(c, y, x)
        }
    }))
}

/// Generated pixels inside the mask, original pixels outside it.
pub fn composite<T: Copy>(
    original: &Grid<T>,
    generated: &Grid<T>,
    mask: &FaceMask,
) -> Result<Grid<T>> {
    generated.ensure_shape(original.shape())?;
    mask.check_plane(original.shape())?;
    Ok(Grid::from_fn(original.shape(), |c, y, x| {
        if mask.is_editable(y, x) {
            *generated.get(c, y, x)
        } else {
            *original.get(c, y, x)
        }
    }))
}
