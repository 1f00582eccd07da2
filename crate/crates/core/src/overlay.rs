//! Box-and-label overlays drawn with a built-in 3x5 pixel font.

use image::{Rgb, RgbImage};

use crate::regions::BBox;

const GLYPH_W: u32 = 3;
const GLYPH_H: u32 = 5;

/// Rows top to bottom, three bits per row, most significant bit on the left.
fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_uppercase() {
        'A' => [0b010, 0b101, 0b111, 0b101, 0b101],
        'B' => [0b110, 0b101, 0b110, 0b101, 0b110],
        'C' => [0b011, 0b100, 0b100, 0b100, 0b011],
        'D' => [0b110, 0b101, 0b101, 0b101, 0b110],
        'E' => [0b111, 0b100, 0b110, 0b100, 0b111],
        'F' => [0b111, 0b100, 0b110, 0b100, 0b100],
        'G' => [0b011, 0b100, 0b101, 0b101, 0b011],
        'H' => [0b101, 0b101, 0b111, 0b101, 0b101],
        'I' => [0b111, 0b010, 0b010, 0b010, 0b111],
        'J' => [0b001, 0b001, 0b001, 0b101, 0b010],
        'K' => [0b101, 0b101, 0b110, 0b101, 0b101],
        'L' => [0b100, 0b100, 0b100, 0b100, 0b111],
        'M' => [0b101, 0b111, 0b111, 0b101, 0b101],
        'N' => [0b110, 0b101, 0b101, 0b101, 0b101],
        'O' => [0b010, 0b101, 0b101, 0b101, 0b010],
        'P' => [0b110, 0b101, 0b110, 0b100, 0b100],
        'Q' => [0b010, 0b101, 0b101, 0b110, 0b011],
        'R' => [0b110, 0b101, 0b110, 0b101, 0b101],
        'S' => [0b011, 0b100, 0b010, 0b001, 0b110],
        'T' => [0b111, 0b010, 0b010, 0b010, 0b010],
        'U' => [0b101, 0b101, 0b101, 0b101, 0b111],
        'V' => [0b101, 0b101, 0b101, 0b101, 0b010],
        'W' => [0b101, 0b101, 0b111, 0b111, 0b101],
        'X' => [0b101, 0b101, 0b010, 0b101, 0b101],
        'Y' => [0b101, 0b101, 0b010, 0b010, 0b010],
        'Z' => [0b111, 0b001, 0b010, 0b100, 0b111],
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b110, 0b001, 0b010, 0b100, 0b111],
        '3' => [0b110, 0b001, 0b010, 0b001, 0b110],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b110, 0b001, 0b110],
        '6' => [0b011, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b110],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '_' => [0b000, 0b000, 0b000, 0b000, 0b111],
        ' ' => [0; 5],
        _ => [0b110, 0b001, 0b010, 0b000, 0b010],
    }
}

/// Distinct, deterministic colour per category index.
pub fn palette(index: usize) -> Rgb<u8> {
    const COLORS: [[u8; 3]; 10] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [0, 128, 128],
    ];
    Rgb(COLORS[index % COLORS.len()])
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn fill(img: &mut RgbImage, x0: i64, y0: i64, w: i64, h: i64, color: Rgb<u8>) {
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            put(img, x, y, color);
        }
    }
}

/// Pixel width of `text` at `scale`.
pub fn text_width(text: &str, scale: u32) -> u32 {
    let n = text.chars().count() as u32;
    if n == 0 {
        0
    } else {
        (n * (GLYPH_W + 1) - 1) * scale
    }
}

/// Draws `text` with its top-left corner at (x, y); clipped at the image edge.
pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, scale: u32, color: Rgb<u8>) {
    let s = i64::from(scale);
    for (i, ch) in text.chars().enumerate() {
        let gx = x + i as i64 * i64::from(GLYPH_W + 1) * s;
        for (row, bits) in glyph(ch).iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits & (1 << (GLYPH_W - 1 - col)) != 0 {
                    fill(img, gx + i64::from(col) * s, y + row as i64 * s, s, s, color);
                }
            }
        }
    }
}

pub fn draw_box(img: &mut RgbImage, b: &BBox, thickness: u32, color: Rgb<u8>) {
    let (x0, y0, x1, y1) = (b.min_col as i64, b.min_row as i64, b.max_col as i64, b.max_row as i64);
    let t = i64::from(thickness);
    fill(img, x0, y0, x1 - x0 + 1, t, color);
    fill(img, x0, y1 - t + 1, x1 - x0 + 1, t, color);
    fill(img, x0, y0, t, y1 - y0 + 1, color);
    fill(img, x1 - t + 1, y0, t, y1 - y0 + 1, color);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Label {
    pub bbox: BBox,
    pub text: String,
    pub category_index: usize,
}

/// Copy of `image` with each label's box and a filled caption above it
/// (inside the box when there is no room above).
pub fn render(image: &RgbImage, labels: &[Label]) -> RgbImage {
    let mut out = image.clone();
    let scale = 1 + image.width().min(image.height()) / 320;
    for label in labels {
        let color = palette(label.category_index);
        draw_box(&mut out, &label.bbox, scale, color);
        let h = i64::from((GLYPH_H + 2) * scale);
        let w = i64::from(text_width(&label.text, scale) + 2 * scale);
        let x = label.bbox.min_col as i64;
        let y = if label.bbox.min_row as i64 >= h { label.bbox.min_row as i64 - h } else { label.bbox.min_row as i64 };
        fill(&mut out, x, y, w, h, color);
        draw_text(&mut out, x + i64::from(scale), y + i64::from(scale), &label.text, scale, Rgb([0, 0, 0]));
    }
    out
}
