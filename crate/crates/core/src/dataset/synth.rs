//! Synthetic colored-shape images with template captions.
//!
//! Each image holds one filled shape on a light background, one labeled
//! bounding box around it, and the caption `a <size> <color> <shape>`.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BBox, CaptionRecord, ImageRecord, Provenance, SplitTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Star,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Star];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Star => "star",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    fn rgb(self) -> Rgb<u8> {
        match self {
            Color::Red => Rgb([220, 30, 30]),
            Color::Green => Rgb([30, 170, 40]),
            Color::Blue => Rgb([30, 60, 220]),
            Color::Yellow => Rgb([235, 200, 20]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn name(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }

    /// Shape radius as a fraction of the image side.
    fn radius_fraction(self) -> f64 {
        match self {
            Size::Small => 0.2,
            Size::Large => 0.36,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ShapeSpec {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
}

impl ShapeSpec {
    pub fn caption(&self) -> String {
        format!("a {} {} {}", self.size.name(), self.color.name(), self.shape.name())
    }
}

/// Every (shape, color, size) combination over `shapes`, in a fixed order.
pub fn all_specs(shapes: &[Shape]) -> Vec<ShapeSpec> {
    let mut out = Vec::new();
    for &shape in shapes {
        for color in Color::ALL {
            for size in Size::ALL {
                out.push(ShapeSpec { shape, color, size });
            }
        }
    }
    out
}

fn polygon(shape: Shape, cx: f64, cy: f64, r: f64) -> Vec<(f64, f64)> {
    use std::f64::consts::PI;
    let ring = |n: usize, radius: &dyn Fn(usize) -> f64| -> Vec<(f64, f64)> {
        (0..n)
            .map(|i| {
                let a = -PI / 2.0 + 2.0 * PI * i as f64 / n as f64;
                (cx + radius(i) * a.cos(), cy + radius(i) * a.sin())
            })
            .collect()
    };
    match shape {
        Shape::Circle => ring(48, &|_| r),
        Shape::Square => {
            let s = r * 0.85;
            vec![(cx - s, cy - s), (cx + s, cy - s), (cx + s, cy + s), (cx - s, cy + s)]
        }
        Shape::Triangle => ring(3, &|_| r),
        Shape::Star => ring(10, &|i| if i % 2 == 0 { r } else { r * 0.45 }),
    }
}

fn inside(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut hit = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            hit = !hit;
        }
        j = i;
    }
    hit
}

/// Render one shape, jittering its center with `rng`. Returns pixels and the
/// labeled box enclosing the painted pixels.
pub fn render(spec: &ShapeSpec, side: u32, rng: &mut impl Rng) -> (RgbImage, BBox) {
    let s = f64::from(side);
    let r = spec.size.radius_fraction() * s;
    let slack = (s / 2.0 - r).max(0.0) * 0.5;
    let cx = s / 2.0 + rng.gen_range(-slack..=slack);
    let cy = s / 2.0 + rng.gen_range(-slack..=slack);
    let poly = polygon(spec.shape, cx, cy, r);
    let mut img = RgbImage::from_pixel(side, side, Rgb([230, 230, 230]));
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    for y in 0..side {
        for x in 0..side {
            if inside(&poly, f64::from(x) + 0.5, f64::from(y) + 0.5) {
                img.put_pixel(x, y, spec.color.rgb());
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    let bbox = if x0 == u32::MAX {
        BBox::new(0.0, 0.0, s, s)
    } else {
        BBox::new(f64::from(x0), f64::from(y0), f64::from(x1 - x0), f64::from(y1 - y0))
    };
    (img, bbox.with_label(spec.shape.name()))
}

/// One image + one ground-truth caption per spec. Ids are `<prefix><index>`.
pub fn make_dataset(
    specs: &[ShapeSpec],
    side: u32,
    seed: u64,
    prefix: &str,
    split: SplitTag,
) -> (Vec<ImageRecord>, Vec<CaptionRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(specs.len());
    let mut captions = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let id = format!("{prefix}{i}");
        let (pixels, bbox) = render(spec, side, &mut rng);
        images.push(ImageRecord::from_rgb(id.clone(), pixels, vec![bbox], split).expect("box inside image"));
        captions.push(CaptionRecord::new(format!("{id}-0"), id, spec.caption(), Provenance::GroundTruth));
    }
    (images, captions)
}
