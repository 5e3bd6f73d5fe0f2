//! Closed attribute vocabularies, the shipped palette and synonym table.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

macro_rules! vocab_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $token:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $token)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn token(self) -> &'static str {
                match self {
                    $($name::$variant => $token),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.token())
            }
        }

        impl FromStr for $name {
            type Err = ();

            /// Exact canonical token match; use [`canonicalize`] for free text.
            fn from_str(s: &str) -> Result<Self, ()> {
                match s {
                    $($token => Ok($name::$variant),)+
                    _ => Err(()),
                }
            }
        }
    };
}

vocab_enum!(
    /// 24-entry named palette. RGB values live in `data/palette.json`.
    Color {
        Red => "red",
        Orange => "orange",
        Yellow => "yellow",
        Lime => "lime",
        Green => "green",
        Olive => "olive",
        SeaFoamGreen => "sea-foam-green",
        Teal => "teal",
        Cyan => "cyan",
        SkyBlue => "sky-blue",
        BrightBlue => "bright-blue",
        Navy => "navy",
        Indigo => "indigo",
        Purple => "purple",
        Magenta => "magenta",
        Pink => "pink",
        Brown => "brown",
        Tan => "tan",
        Cream => "cream",
        White => "white",
        LightGray => "light-gray",
        Gray => "gray",
        Charcoal => "charcoal",
        Maroon => "maroon",
    }
);

vocab_enum!(Size {
    Small => "small",
    Medium => "medium",
    Large => "large",
});

vocab_enum!(Material {
    Matte => "matte",
    Striped => "striped",
    Dotted => "dotted",
    Glossy => "glossy",
});

vocab_enum!(Shape {
    Rectangle => "rectangle",
    Circle => "circle",
    Triangle => "triangle",
});

vocab_enum!(
    /// The four editable attributes of an object.
    Attribute {
        Color => "color",
        Size => "size",
        Material => "material",
        Shape => "shape",
    }
);

/// A value from one attribute's vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "attribute", content = "value", rename_all = "snake_case")]
pub enum AttrValue {
    Color(Color),
    Size(Size),
    Material(Material),
    Shape(Shape),
}

impl AttrValue {
    pub fn attribute(self) -> Attribute {
        match self {
            AttrValue::Color(_) => Attribute::Color,
            AttrValue::Size(_) => Attribute::Size,
            AttrValue::Material(_) => Attribute::Material,
            AttrValue::Shape(_) => Attribute::Shape,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            AttrValue::Color(v) => v.token(),
            AttrValue::Size(v) => v.token(),
            AttrValue::Material(v) => v.token(),
            AttrValue::Shape(v) => v.token(),
        }
    }

    /// Canonical token lookup for a named attribute.
    pub fn from_token(attribute: Attribute, token: &str) -> Option<AttrValue> {
        Some(match attribute {
            Attribute::Color => AttrValue::Color(token.parse().ok()?),
            Attribute::Size => AttrValue::Size(token.parse().ok()?),
            Attribute::Material => AttrValue::Material(token.parse().ok()?),
            Attribute::Shape => AttrValue::Shape(token.parse().ok()?),
        })
    }
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rgb {
    pub r: u8,
    pub g: u8,
    pub b: u8,
}

impl Rgb {
    pub fn to_array(self) -> [u8; 3] {
        [self.r, self.g, self.b]
    }
}

pub const PALETTE_JSON: &str = include_str!("../../data/palette.json");
pub const SYNONYMS_JSON: &str = include_str!("../../data/synonyms.json");

#[derive(Deserialize)]
struct PaletteFile {
    colors: HashMap<String, Rgb>,
}

static PALETTE: LazyLock<Vec<Rgb>> = LazyLock::new(|| {
    let file: PaletteFile = serde_json::from_str(PALETTE_JSON).expect("palette.json is valid");
    Color::ALL
        .iter()
        .map(|c| {
            *file
                .colors
                .get(c.token())
                .unwrap_or_else(|| panic!("palette.json lacks {c}"))
        })
        .collect()
});

impl Color {
    pub fn rgb(self) -> Rgb {
        PALETTE[self as usize]
    }
}

#[derive(Deserialize)]
struct SynonymFile {
    color: HashMap<String, String>,
    size: HashMap<String, String>,
    material: HashMap<String, String>,
    shape: HashMap<String, String>,
}

static SYNONYMS: LazyLock<SynonymFile> =
    LazyLock::new(|| serde_json::from_str(SYNONYMS_JSON).expect("synonyms.json is valid"));

/// Result of mapping free text onto a closed vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Canonical {
    Value(AttrValue),
    NotCanonical,
}

impl Canonical {
    pub fn value(self) -> Option<AttrValue> {
        match self {
            Canonical::Value(v) => Some(v),
            Canonical::NotCanonical => None,
        }
    }
}

/// Lowercases, trims and joins words with single hyphens.
pub fn normalize_token(raw: &str) -> String {
    raw.trim()
        .to_lowercase()
        .split(|c: char| c.is_whitespace() || c == '-' || c == '_')
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join("-")
}

/// Maps a raw attribute value (any case, spaces, known synonyms) to its
/// canonical token.
pub fn canonicalize(attribute: Attribute, raw: &str) -> Canonical {
    let norm = normalize_token(raw);
    if norm.is_empty() {
        return Canonical::NotCanonical;
    }
    if let Some(v) = AttrValue::from_token(attribute, &norm) {
        return Canonical::Value(v);
    }
    let table = match attribute {
        Attribute::Color => &SYNONYMS.color,
        Attribute::Size => &SYNONYMS.size,
        Attribute::Material => &SYNONYMS.material,
        Attribute::Shape => &SYNONYMS.shape,
    };
    table
        .get(&norm)
        .and_then(|canon| AttrValue::from_token(attribute, canon))
        .map_or(Canonical::NotCanonical, Canonical::Value)
}

/// Same as [`canonicalize`] but takes the attribute by name.
pub fn canonicalize_named(attribute_name: &str, raw: &str) -> Canonical {
    match normalize_token(attribute_name).parse::<Attribute>() {
        Ok(attr) => canonicalize(attr, raw),
        Err(()) => Canonical::NotCanonical,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_is_complete_and_in_shading_range() {
        assert_eq!(Color::ALL.len(), 24);
        for c in Color::ALL {
            let rgb = c.rgb();
            // patterns darken by at most 56, so no channel may clip
            assert!(rgb.r >= 64 && rgb.g >= 64 && rgb.b >= 64, "{c}");
        }
    }

    #[test]
    fn synonym_targets_are_canonical() {
        for (attr, table) in [
            (Attribute::Color, &SYNONYMS.color),
            (Attribute::Size, &SYNONYMS.size),
            (Attribute::Material, &SYNONYMS.material),
            (Attribute::Shape, &SYNONYMS.shape),
        ] {
            for (k, v) in table {
                assert!(AttrValue::from_token(attr, v).is_some(), "{k} -> {v}");
            }
        }
    }

    #[test]
    fn canonicalize_examples() {
        assert_eq!(
            canonicalize(Attribute::Color, "Bright Blue"),
            Canonical::Value(AttrValue::Color(Color::BrightBlue))
        );
        assert_eq!(
            canonicalize(Attribute::Color, "sea foam green"),
            Canonical::Value(AttrValue::Color(Color::SeaFoamGreen))
        );
        assert_eq!(
            canonicalize(Attribute::Color, "Sea-Foam Green"),
            Canonical::Value(AttrValue::Color(Color::SeaFoamGreen))
        );
        assert_eq!(canonicalize(Attribute::Size, "huge"), Canonical::NotCanonical);
        assert_eq!(
            canonicalize_named("material", "stripey"),
            Canonical::Value(AttrValue::Material(Material::Striped))
        );
        assert_eq!(canonicalize(Attribute::Shape, "  "), Canonical::NotCanonical);
        assert_eq!(canonicalize_named("weight", "heavy"), Canonical::NotCanonical);
    }
}
