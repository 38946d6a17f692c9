//! Procedural garment corpus with planted attribute labels and a declared
//! compatibility rule.
//!
//! Every garment is a flat silhouette on a light background. The planted
//! labels map onto the picture as follows:
//!
//! | attribute | rendering                                              |
//! |-----------|--------------------------------------------------------|
//! | category  | silhouette: tee (sleeves), tank, skirt (flared), trousers (two legs) |
//! | colour    | fill hue, six classes 60° apart                        |
//! | pattern   | plain, horizontal stripes, or stripes in both directions |
//! | tone      | light (pale, bright) or dark (saturated, dim) fill     |
//! | length    | vertical extent of the garment                         |
//!
//! [`decode_labels`] inverts the renderer exactly.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Attribute, AttributeSchema, CategorySet, Corpus, Image, Item, OutfitPair, Side};
use crate::error::{AfrecError, Result};

pub const COLOURS: [&str; 6] = ["red", "yellow", "green", "cyan", "blue", "magenta"];
pub const PATTERNS: [&str; 3] = ["plain", "striped", "checked"];
pub const TONES: [&str; 2] = ["light", "dark"];
pub const LENGTHS: [&str; 3] = ["short", "regular", "long"];
pub const CATEGORIES: [&str; 4] = ["tee", "tank", "skirt", "trousers"];

const TEE: usize = 0;
const TANK: usize = 1;
const SKIRT: usize = 2;
const TROUSERS: usize = 3;

const PLAIN: usize = 0;
const STRIPED: usize = 1;
const CHECKED: usize = 2;

const LIGHT: usize = 0;

/// Garment height as a fraction of the image side, per length class.
const LENGTH_FRACTION: [f64; 3] = [0.45, 0.65, 0.85];
const BACKGROUND: f64 = 1.0;
const STRIPE: f64 = 0.08;
const NOISE: f64 = 0.02;

/// Planted labels of one garment, as indices into the synthetic schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GarmentLabels {
    pub category: usize,
    pub colour: usize,
    pub pattern: usize,
    pub tone: usize,
    pub length: usize,
}

impl GarmentLabels {
    pub fn side(&self) -> Side {
        if self.category == TEE || self.category == TANK {
            Side::Top
        } else {
            Side::Bottom
        }
    }

    fn as_attribute_labels(&self) -> Vec<Option<usize>> {
        vec![Some(self.colour), Some(self.pattern), Some(self.tone), Some(self.length)]
    }

    /// Every label combination of one side.
    pub fn enumerate(side: Side) -> Vec<GarmentLabels> {
        let cats: &[usize] = match side {
            Side::Top => &[TEE, TANK],
            Side::Bottom => &[SKIRT, TROUSERS],
        };
        let mut out = Vec::new();
        for &category in cats {
            for colour in 0..COLOURS.len() {
                for pattern in 0..PATTERNS.len() {
                    for tone in 0..TONES.len() {
                        for length in 0..LENGTHS.len() {
                            out.push(GarmentLabels { category, colour, pattern, tone, length });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RuleSet {
    /// A top and a bottom match when all of the following hold:
    /// their colours are neighbours on the six-step hue wheel; at most one
    /// of them is patterned; a skirt contrasts with the top's tone while
    /// trousers share it; and their length classes sum to 2 (long with
    /// short, regular with regular).
    #[default]
    Planted,
    /// Every top matches every bottom.
    AlwaysCompatible,
}

impl RuleSet {
    pub fn compatible(&self, top: &GarmentLabels, bottom: &GarmentLabels) -> bool {
        match self {
            RuleSet::AlwaysCompatible => true,
            RuleSet::Planted => {
                let n = COLOURS.len();
                let hue_step = (top.colour + n - bottom.colour) % n;
                let adjacent = hue_step == 1 || hue_step == n - 1;
                let one_plain = top.pattern == PLAIN || bottom.pattern == PLAIN;
                let tone_ok = if bottom.category == SKIRT {
                    top.tone != bottom.tone
                } else {
                    top.tone == bottom.tone
                };
                adjacent && one_plain && tone_ok && top.length + bottom.length == 2
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_tops: usize,
    pub n_bottoms: usize,
    pub image_size: usize,
    pub seed: u64,
    pub rule_set: RuleSet,
    /// Probability that any single attribute label is withheld from an item.
    pub label_dropout: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_tops: 300,
            n_bottoms: 300,
            image_size: 64,
            seed: 7,
            rule_set: RuleSet::Planted,
            label_dropout: 0.0,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.n_tops < 10 || self.n_bottoms < 10 {
            return Err(AfrecError::ConfigInvalid("need at least 10 tops and 10 bottoms".into()));
        }
        if self.image_size < 32 {
            return Err(AfrecError::ConfigInvalid("image_size must be at least 32".into()));
        }
        if !(0.0..1.0).contains(&self.label_dropout) {
            return Err(AfrecError::ConfigInvalid("label_dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

pub fn synthetic_schema() -> AttributeSchema {
    let attr = |name: &str, values: &[&str]| Attribute {
        name: name.to_string(),
        values: values.iter().map(|v| v.to_string()).collect(),
    };
    AttributeSchema {
        attributes: vec![
            attr("colour", &COLOURS),
            attr("pattern", &PATTERNS),
            attr("tone", &TONES),
            attr("length", &LENGTHS),
        ],
    }
}

pub fn synthetic_categories() -> CategorySet {
    CategorySet {
        categories: CATEGORIES.iter().map(|c| c.to_string()).collect(),
    }
}

/// Generated corpus plus the labels that were planted in it (including any
/// labels withheld from the items by `label_dropout`).
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub planted: Vec<GarmentLabels>,
}

pub fn generate_synthetic_corpus(config: &SyntheticConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut items = Vec::with_capacity(config.n_tops + config.n_bottoms);
    let mut planted = Vec::with_capacity(items.capacity());
    let jitter = (config.image_size / 32) as i64;

    for (side, count, prefix, cats) in [
        (Side::Top, config.n_tops, 't', [TEE, TANK]),
        (Side::Bottom, config.n_bottoms, 'b', [SKIRT, TROUSERS]),
    ] {
        for i in 0..count {
            let labels = GarmentLabels {
                category: cats[rng.random_range(0..2)],
                colour: rng.random_range(0..COLOURS.len()),
                pattern: rng.random_range(0..PATTERNS.len()),
                tone: rng.random_range(0..TONES.len()),
                length: rng.random_range(0..LENGTHS.len()),
            };
            let dx = rng.random_range(-jitter..=jitter);
            let dy = rng.random_range(-jitter..=jitter);
            let image = render_garment(&labels, config.image_size, dx, dy, &mut rng);
            let mut attribute_labels = labels.as_attribute_labels();
            if config.label_dropout > 0.0 {
                for l in attribute_labels.iter_mut() {
                    if rng.random::<f64>() < config.label_dropout {
                        *l = None;
                    }
                }
            }
            items.push(Item {
                id: format!("{prefix}{i:04}"),
                side,
                image,
                category: labels.category,
                attribute_labels,
            });
            planted.push(labels);
        }
    }

    let mut positives = Vec::new();
    for t in 0..config.n_tops {
        for b in config.n_tops..config.n_tops + config.n_bottoms {
            if config.rule_set.compatible(&planted[t], &planted[b]) {
                positives.push(OutfitPair { top: t, bottom: b });
            }
        }
    }
    let split_seed = rng.random::<u64>();
    let corpus = Corpus::new(
        synthetic_schema(),
        synthetic_categories(),
        items,
        positives,
        None,
        split_seed,
    )?;
    Ok(SyntheticCorpus { corpus, planted })
}

struct Geometry {
    size: usize,
    y0: i64,
    height: i64,
    cx: f64,
}

impl Geometry {
    fn new(labels: &GarmentLabels, size: usize, dx: i64, dy: i64) -> Self {
        let s = size as f64;
        Self {
            size,
            y0: (0.06 * s).round() as i64 + dy,
            height: (LENGTH_FRACTION[labels.length] * s).round() as i64,
            cx: s / 2.0 + dx as f64,
        }
    }

    /// Whether pixel `(y, x)` lies on the garment silhouette.
    fn covers(&self, category: usize, y: i64, x: i64) -> bool {
        if y < self.y0 || y >= self.y0 + self.height {
            return false;
        }
        let s = self.size as f64;
        let rel = (y - self.y0) as f64 / self.height as f64;
        let off = (x as f64 + 0.5 - self.cx).abs();
        match category {
            TEE => {
                let sleeve = ((y - self.y0) as f64) < 0.16 * s;
                off < if sleeve { 0.36 * s } else { 0.2 * s }
            }
            TANK => off < 0.14 * s,
            SKIRT => off < (0.16 + 0.18 * rel) * s,
            _ => {
                if rel < 0.25 {
                    off < 0.2 * s
                } else {
                    off > 0.04 * s && off < 0.2 * s
                }
            }
        }
    }
}

fn hsv_to_rgb(hue_deg: f64, sat: f64, val: f64) -> [f64; 3] {
    let c = val * sat;
    let h = (hue_deg / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    [r + m, g + m, b + m]
}

fn rgb_to_hue(rgb: [f64; 3]) -> f64 {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d <= 0.0 {
        return 0.0;
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    60.0 * h
}

fn fill_colour(labels: &GarmentLabels) -> [f64; 3] {
    let hue = 60.0 * labels.colour as f64;
    if labels.tone == LIGHT {
        hsv_to_rgb(hue, 0.45, 1.0)
    } else {
        hsv_to_rgb(hue, 1.0, 0.55)
    }
}

fn stripe_period(size: usize) -> i64 {
    ((size as f64 / 8.0).round() as i64).max(4)
}

/// Renders one garment. `dx`/`dy` shift the silhouette; `rng` drives a small
/// per-sample noise that never crosses a decoding threshold.
pub fn render_garment(labels: &GarmentLabels, size: usize, dx: i64, dy: i64, rng: &mut impl Rng) -> Image {
    let geo = Geometry::new(labels, size, dx, dy);
    let fill = fill_colour(labels);
    let period = stripe_period(size);
    let band = (period / 4).max(1);
    let x_origin = (geo.cx - 0.4 * size as f64).floor() as i64;
    let mut values = Array3::<f64>::zeros((size, size, 3));
    for y in 0..size as i64 {
        for x in 0..size as i64 {
            let base = if geo.covers(labels.category, y, x) {
                let h_band = (y - geo.y0).rem_euclid(period) >= period - band;
                let v_band = (x - x_origin).rem_euclid(period) >= period - band;
                let striped = match labels.pattern {
                    STRIPED => h_band,
                    CHECKED => h_band || v_band,
                    _ => false,
                };
                if striped {
                    [STRIPE; 3]
                } else {
                    fill
                }
            } else {
                [BACKGROUND; 3]
            };
            for c in 0..3 {
                let noise = rng.random_range(-NOISE..=NOISE);
                values[[y as usize, x as usize, c]] = base[c] + noise;
            }
        }
    }
    Image::from_unit(&values).expect("square RGB buffer")
}

/// Recovers the planted labels from a rendered garment.
pub fn decode_labels(image: &Image, side: Side) -> Option<GarmentLabels> {
    let s = image.size();
    let garment = |y: usize, x: usize| image.rgb(y, x).iter().cloned().fold(f64::INFINITY, f64::min) < 0.75;
    let stripe = |y: usize, x: usize| image.rgb(y, x).iter().cloned().fold(0.0, f64::max) < 0.25;

    let rows: Vec<usize> = (0..s).filter(|&y| (0..s).any(|x| garment(y, x))).collect();
    let (&first, &last) = (rows.first()?, rows.last()?);
    let height = (last - first + 1) as f64 / s as f64;
    let length = (0..LENGTHS.len())
        .min_by(|&a, &b| {
            (LENGTH_FRACTION[a] - height)
                .abs()
                .total_cmp(&(LENGTH_FRACTION[b] - height).abs())
        })
        .unwrap();

    let mut sum = [0.0; 3];
    let mut n_fill = 0usize;
    let mut any_stripe = false;
    let mut stripe_in_fill_row = false;
    for &y in &rows {
        let mut row_fill = false;
        let mut row_stripe = false;
        for x in 0..s {
            if !garment(y, x) {
                continue;
            }
            if stripe(y, x) {
                row_stripe = true;
            } else {
                row_fill = true;
                let px = image.rgb(y, x);
                for c in 0..3 {
                    sum[c] += px[c];
                }
                n_fill += 1;
            }
        }
        any_stripe |= row_stripe;
        stripe_in_fill_row |= row_stripe && row_fill;
    }
    if n_fill == 0 {
        return None;
    }
    let mean = sum.map(|v| v / n_fill as f64);
    let colour = ((rgb_to_hue(mean) / 60.0).round() as usize) % COLOURS.len();
    let tone = if mean.iter().cloned().fold(0.0, f64::max) > 0.78 { 0 } else { 1 };
    let pattern = match (any_stripe, stripe_in_fill_row) {
        (false, _) => PLAIN,
        (true, false) => STRIPED,
        (true, true) => CHECKED,
    };

    let category = match side {
        Side::Top => {
            let widest = rows.iter().map(|&y| (0..s).filter(|&x| garment(y, x)).count()).max()?;
            if widest as f64 > 0.5 * s as f64 {
                TEE
            } else {
                TANK
            }
        }
        Side::Bottom => {
            let y = first + ((last - first) as f64 * 0.8) as usize;
            let mut runs = 0;
            let mut inside = false;
            for x in 0..s {
                let g = garment(y, x);
                if g && !inside {
                    runs += 1;
                }
                inside = g;
            }
            if runs >= 2 {
                TROUSERS
            } else {
                SKIRT
            }
        }
    };
    Some(GarmentLabels { category, colour, pattern, tone, length })
}
