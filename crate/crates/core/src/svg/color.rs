use std::fmt;

/// RGB color with channels normalized to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Color {
    pub r: f64,
    pub g: f64,
    pub b: f64,
}

const KEYWORDS: [(&str, [u8; 3]); 16] = [
    ("black", [0, 0, 0]),
    ("silver", [192, 192, 192]),
    ("gray", [128, 128, 128]),
    ("white", [255, 255, 255]),
    ("maroon", [128, 0, 0]),
    ("red", [255, 0, 0]),
    ("purple", [128, 0, 128]),
    ("fuchsia", [255, 0, 255]),
    ("green", [0, 128, 0]),
    ("lime", [0, 255, 0]),
    ("olive", [128, 128, 0]),
    ("yellow", [255, 255, 0]),
    ("navy", [0, 0, 128]),
    ("blue", [0, 0, 255]),
    ("teal", [0, 128, 128]),
    ("aqua", [0, 255, 255]),
];

impl Color {
    pub const BLACK: Color = Color::new(0.0, 0.0, 0.0);
    pub const WHITE: Color = Color::new(1.0, 1.0, 1.0);

    pub const fn new(r: f64, g: f64, b: f64) -> Self {
        Self { r, g, b }
    }

    pub fn from_rgb8(r: u8, g: u8, b: u8) -> Self {
        Self::new(
            f64::from(r) / 255.0,
            f64::from(g) / 255.0,
            f64::from(b) / 255.0,
        )
    }

    pub fn to_rgb8(self) -> [u8; 3] {
        let q = |c: f64| (c.clamp(0.0, 1.0) * 255.0).round() as u8;
        [q(self.r), q(self.g), q(self.b)]
    }

    /// Snaps each channel to the nearest 8-bit level.
    pub fn quantized(self) -> Self {
        let [r, g, b] = self.to_rgb8();
        Self::from_rgb8(r, g, b)
    }

    pub fn channels(self) -> [f64; 3] {
        [self.r, self.g, self.b]
    }

    /// Parses `#rgb`, `#rrggbb`, `rgb(...)` and the 16 basic keywords.
    pub fn parse(text: &str) -> Option<Color> {
        let s = text.trim();
        if let Some(hex) = s.strip_prefix('#') {
            let digits: Vec<u8> = hex
                .chars()
                .map(|c| c.to_digit(16).map(|d| d as u8))
                .collect::<Option<_>>()?;
            return match digits.len() {
                3 => Some(Color::from_rgb8(
                    digits[0] * 17,
                    digits[1] * 17,
                    digits[2] * 17,
                )),
                6 => Some(Color::from_rgb8(
                    digits[0] * 16 + digits[1],
                    digits[2] * 16 + digits[3],
                    digits[4] * 16 + digits[5],
                )),
                _ => None,
            };
        }
        let lower = s.to_ascii_lowercase();
        if let Some(inner) = lower
            .strip_prefix("rgb(")
            .and_then(|rest| rest.strip_suffix(')'))
        {
            let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return None;
            }
            let mut ch = [0u8; 3];
            for (slot, part) in ch.iter_mut().zip(&parts) {
                let v = if let Some(pct) = part.strip_suffix('%') {
                    pct.trim().parse::<f64>().ok()? / 100.0 * 255.0
                } else {
                    part.parse::<f64>().ok()?
                };
                if !v.is_finite() {
                    return None;
                }
                *slot = v.round().clamp(0.0, 255.0) as u8;
            }
            return Some(Color::from_rgb8(ch[0], ch[1], ch[2]));
        }
        KEYWORDS
            .iter()
            .find(|(name, _)| *name == lower)
            .map(|(_, [r, g, b])| Color::from_rgb8(*r, *g, *b))
    }

    /// Shortest hex form: `#rgb` when every channel is a doubled nibble.
    pub fn to_hex(self) -> String {
        let [r, g, b] = self.to_rgb8();
        if r % 17 == 0 && g % 17 == 0 && b % 17 == 0 {
            format!("#{:x}{:x}{:x}", r / 17, g / 17, b / 17)
        } else {
            format!("#{r:02x}{g:02x}{b:02x}")
        }
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_forms() {
        assert_eq!(Color::parse("#f00"), Some(Color::new(1.0, 0.0, 0.0)));
        assert_eq!(Color::parse("#00ff00"), Some(Color::new(0.0, 1.0, 0.0)));
        assert_eq!(Color::parse("#12"), None);
        assert_eq!(Color::parse("#zzz"), None);
    }

    #[test]
    fn functional_and_keywords() {
        assert_eq!(
            Color::parse("rgb(0, 0, 255)"),
            Some(Color::new(0.0, 0.0, 1.0))
        );
        assert_eq!(
            Color::parse("rgb(100%,0%,0%)"),
            Some(Color::new(1.0, 0.0, 0.0))
        );
        assert_eq!(Color::parse("Navy"), Color::parse("#000080"));
        assert_eq!(Color::parse("rebeccapurple"), None);
        assert_eq!(Color::parse("hsl(0,0%,0%)"), None);
    }

    #[test]
    fn hex_roundtrip_is_exact() {
        for v in [0u8, 1, 17, 128, 254, 255] {
            let c = Color::from_rgb8(v, 255 - v, v / 2);
            assert_eq!(Color::parse(&c.to_hex()), Some(c));
        }
        assert_eq!(Color::new(1.0, 0.0, 0.0).to_hex(), "#f00");
    }
}
