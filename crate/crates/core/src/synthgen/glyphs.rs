/// A rasterisable class shape defined on the unit square (v grows downward).
#[derive(Debug, Clone, Copy)]
pub struct Glyph {
    pub name: &'static str,
    inside: fn(f64, f64) -> bool,
}

impl Glyph {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v) && (self.inside)(u, v)
    }
}

fn r2(u: f64, v: f64, cu: f64, cv: f64) -> f64 {
    (u - cu).powi(2) + (v - cv).powi(2)
}

pub const GLYPHS: [Glyph; 12] = [
    Glyph { name: "disk", inside: |u, v| r2(u, v, 0.5, 0.5) <= 0.25 },
    Glyph { name: "square", inside: |_, _| true },
    Glyph {
        name: "ring",
        inside: |u, v| (0.09..=0.25).contains(&r2(u, v, 0.5, 0.5)),
    },
    Glyph {
        name: "cross",
        inside: |u, v| (u - 0.5).abs() <= 0.17 || (v - 0.5).abs() <= 0.17,
    },
    Glyph { name: "bars", inside: |_, v| ((v * 5.0).floor() as i64) % 2 == 0 },
    Glyph { name: "triangle", inside: |u, v| v >= 2.0 * (u - 0.5).abs() - 0.05 },
    Glyph {
        name: "wedge",
        inside: |u, v| 1.0 - v >= 2.0 * (u - 0.5).abs() - 0.05,
    },
    Glyph {
        name: "diamond",
        inside: |u, v| (u - 0.5).abs() + (v - 0.5).abs() <= 0.5,
    },
    Glyph {
        name: "checker",
        inside: |u, v| ((u * 3.0).floor() as i64 + (v * 3.0).floor() as i64) % 2 == 0,
    },
    Glyph { name: "ell", inside: |u, v| u <= 0.34 || v >= 0.66 },
    Glyph {
        name: "dots",
        inside: |u, v| {
            [(0.17, 0.17), (0.83, 0.17), (0.5, 0.5), (0.17, 0.83), (0.83, 0.83)]
                .iter()
                .any(|&(cu, cv)| r2(u, v, cu, cv) <= 0.17 * 0.17)
        },
    },
    Glyph {
        name: "frame",
        inside: |u, v| u < 0.2 || u > 0.8 || v < 0.2 || v > 0.8,
    },
];
