//! Value types shared by every stage of the pipeline: the class and scale
//! registries, the one-hot task/scale codes, and the `Sample` unit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Semantic label shared by the NEPTUNE peritubular capillaries and the
/// HuBMAP microvessel annotations.
pub const MICROVASCULAR_LABEL: &str = "MV";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: usize,
    pub name: String,
    pub semantic_label: String,
}

/// Ordered tissue-type registry. The position of an entry is its task id and
/// the index of the hot element in its [`TaskCode`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct ClassRegistry {
    entries: Vec<ClassEntry>,
}

impl ClassRegistry {
    pub fn new(entries: Vec<ClassEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Registry("class registry is empty".into()));
        }
        for (expected, entry) in entries.iter().enumerate() {
            if entry.id != expected {
                return Err(Error::Registry(format!(
                    "class ids must be 0..m-1 in order; found id {} at position {expected}",
                    entry.id
                )));
            }
            if entries[..expected].iter().any(|e| e.name == entry.name) {
                return Err(Error::Registry(format!(
                    "duplicate class name `{}`",
                    entry.name
                )));
            }
        }
        Ok(Self { entries })
    }

    /// Number of task codes, `m`.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn entry(&self, task_id: usize) -> Result<&ClassEntry> {
        self.entries.get(task_id).ok_or(Error::Index {
            what: "class registry",
            index: task_id,
            len: self.entries.len(),
        })
    }

    pub fn by_name(&self, name: &str) -> Result<&ClassEntry> {
        self.entries.iter().find(|e| e.name == name).ok_or_else(|| {
            Error::Registry(format!(
                "unknown task `{name}`; valid names: {}",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn encode(&self, task_id: usize) -> Result<TaskCode> {
        encode_task(task_id, self.len())
    }
}

impl<'de> Deserialize<'de> for ClassRegistry {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let entries = Vec::<ClassEntry>::deserialize(d)?;
        ClassRegistry::new(entries).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleEntry {
    pub id: usize,
    pub magnification: u32,
}

/// Ordered magnification registry; magnifications strictly increase with id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct ScaleRegistry {
    entries: Vec<ScaleEntry>,
}

impl ScaleRegistry {
    pub fn new(entries: Vec<ScaleEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Registry("scale registry is empty".into()));
        }
        for (expected, entry) in entries.iter().enumerate() {
            if entry.id != expected {
                return Err(Error::Registry(format!(
                    "scale ids must be 0..n-1 in order; found id {} at position {expected}",
                    entry.id
                )));
            }
            if expected > 0 && entries[expected - 1].magnification >= entry.magnification {
                return Err(Error::Registry(
                    "magnifications must be strictly increasing".into(),
                ));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ScaleEntry] {
        &self.entries
    }

    pub fn entry(&self, scale_id: usize) -> Result<&ScaleEntry> {
        self.entries.get(scale_id).ok_or(Error::Index {
            what: "scale registry",
            index: scale_id,
            len: self.entries.len(),
        })
    }

    pub fn by_magnification(&self, magnification: u32) -> Result<&ScaleEntry> {
        self.entries
            .iter()
            .find(|e| e.magnification == magnification)
            .ok_or_else(|| {
                let valid: Vec<String> = self
                    .entries
                    .iter()
                    .map(|e| e.magnification.to_string())
                    .collect();
                Error::Registry(format!(
                    "unknown magnification {magnification}; valid: {}",
                    valid.join(", ")
                ))
            })
    }

    pub fn encode(&self, scale_id: usize) -> Result<ScaleCode> {
        encode_scale(scale_id, self.len())
    }
}

impl<'de> Deserialize<'de> for ScaleRegistry {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let entries = Vec::<ScaleEntry>::deserialize(d)?;
        ScaleRegistry::new(entries).map_err(serde::de::Error::custom)
    }
}

/// Both registries, serialized together with every checkpoint.
///
/// Text form (TOML):
///
/// ```toml
/// [[classes]]
/// id = 0
/// name = "TUFT"
/// semantic_label = "TUFT"
///
/// [[scales]]
/// id = 0
/// magnification = 5
/// ```
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registries {
    pub classes: ClassRegistry,
    pub scales: ScaleRegistry,
}

impl Registries {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

impl Default for Registries {
    fn default() -> Self {
        let (classes, scales) = default_registries();
        Self { classes, scales }
    }
}

/// Seven task codes (six NEPTUNE primitives plus HuBMAP microvessels) and
/// the four magnifications 5×, 10×, 20×, 40×.
pub fn default_registries() -> (ClassRegistry, ScaleRegistry) {
    let classes = [
        ("TUFT", "TUFT"),
        ("CAP", "CAP"),
        ("PT", "PT"),
        ("DT", "DT"),
        ("PTC", MICROVASCULAR_LABEL),
        ("ART", "ART"),
        ("HUBMAP_MV", MICROVASCULAR_LABEL),
    ]
    .iter()
    .enumerate()
    .map(|(id, (name, label))| ClassEntry {
        id,
        name: (*name).to_string(),
        semantic_label: (*label).to_string(),
    })
    .collect();
    let scales = [5, 10, 20, 40]
        .iter()
        .enumerate()
        .map(|(id, &magnification)| ScaleEntry { id, magnification })
        .collect();
    (
        ClassRegistry::new(classes).expect("default class registry is valid"),
        ScaleRegistry::new(scales).expect("default scale registry is valid"),
    )
}

/// One-hot vector over tissue types.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskCode(OneHot);

/// One-hot vector over magnifications.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleCode(OneHot);

#[derive(Clone, Debug, PartialEq)]
struct OneHot {
    hot: usize,
    vector: Vec<f64>,
}

impl OneHot {
    fn new(hot: usize, len: usize, what: &'static str) -> Result<Self> {
        if hot >= len {
            return Err(Error::Index {
                what,
                index: hot,
                len,
            });
        }
        let mut vector = vec![0.0; len];
        vector[hot] = 1.0;
        Ok(Self { hot, vector })
    }
}

macro_rules! one_hot_accessors {
    ($ty:ty) => {
        impl $ty {
            pub fn as_slice(&self) -> &[f64] {
                &self.0.vector
            }

            pub fn len(&self) -> usize {
                self.0.vector.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.vector.is_empty()
            }

            /// Position of the hot element (the encoded id).
            pub fn decode(&self) -> usize {
                self.0.hot
            }
        }
    };
}

one_hot_accessors!(TaskCode);
one_hot_accessors!(ScaleCode);

pub fn encode_task(task_id: usize, m: usize) -> Result<TaskCode> {
    OneHot::new(task_id, m, "task code").map(TaskCode)
}

pub fn encode_scale(scale_id: usize, n: usize) -> Result<ScaleCode> {
    OneHot::new(scale_id, n, "scale code").map(ScaleCode)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Source {
    Neptune,
    Hubmap,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Split {
    Train,
    Val,
    Test,
}

macro_rules! upper_enum_text {
    ($ty:ty { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_uppercase().as_str() {
                    $($text => Ok(Self::$variant),)+
                    other => Err(Error::invalid(format!(
                        concat!("unknown ", stringify!($ty), " `{}`"),
                        other
                    ))),
                }
            }
        }
    };
}

upper_enum_text!(Source { Neptune => "NEPTUNE", Hubmap => "HUBMAP", Synthetic => "SYNTHETIC" });
upper_enum_text!(Split { Train => "TRAIN", Val => "VAL", Test => "TEST" });

/// RGB patch stored channels-last, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Patch {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::shape(format!(
                "patch data has {} values, expected {height}x{width}x3",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "patch value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access; callers keep values inside [0, 1].
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channels-first copy for the network.
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * 3];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = f64::from(px[c]);
            }
        }
        out
    }
}

/// Binary mask, one byte per pixel holding 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "mask has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("mask value {v} is not binary")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| usize::from(v)).sum()
    }
}

/// One training or evaluation unit: a patch with the mask of its single
/// labeled tissue type.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Patch,
    pub mask: Mask,
    pub task_id: usize,
    pub scale_id: usize,
    pub source: Source,
    pub split: Split,
}

impl Sample {
    pub fn new(
        image: Patch,
        mask: Mask,
        task_id: usize,
        scale_id: usize,
        source: Source,
        split: Split,
    ) -> Result<Self> {
        if image.height() != mask.height() || image.width() != mask.width() {
            return Err(Error::shape(format!(
                "image is {}x{} but mask is {}x{}",
                image.height(),
                image.width(),
                mask.height(),
                mask.width()
            )));
        }
        Ok(Self {
            image,
            mask,
            task_id,
            scale_id,
            source,
            split,
        })
    }

    pub fn validate(&self, registries: &Registries) -> Result<()> {
        registries.classes.entry(self.task_id)?;
        registries.scales.entry(self.scale_id)?;
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_task_examples() {
        assert_eq!(
            encode_task(0, 7).unwrap().as_slice(),
            &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(
            encode_task(6, 7).unwrap().as_slice(),
            &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]
        );
        let err = encode_task(7, 7).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Index { index: 7, len: 7, .. }));
        assert!(msg.contains('7'), "{msg}");
    }

    #[test]
    fn encode_scale_examples() {
        assert_eq!(encode_scale(2, 4).unwrap().as_slice(), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(encode_scale(0, 4).unwrap().as_slice(), &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            encode_scale(4, 4),
            Err(Error::Index { index: 4, len: 4, .. })
        ));
    }

    #[test]
    fn default_registry_layout() {
        let (classes, scales) = default_registries();
        assert_eq!(classes.len(), 7);
        assert_eq!(scales.len(), 4);
        let ptc = classes.entry(4).unwrap();
        assert_eq!(ptc.name, "PTC");
        assert_eq!(ptc.semantic_label, "MV");
        assert_eq!(classes.entry(6).unwrap().semantic_label, "MV");
        assert_eq!(scales.entry(3).unwrap().magnification, 40);
        assert_eq!(scales.by_magnification(20).unwrap().id, 2);
    }

    #[test]
    fn registry_rejects_gaps_and_duplicates() {
        let gap = vec![
            ClassEntry { id: 0, name: "A".into(), semantic_label: "A".into() },
            ClassEntry { id: 2, name: "B".into(), semantic_label: "B".into() },
        ];
        assert!(ClassRegistry::new(gap).is_err());
        let dup = vec![
            ClassEntry { id: 0, name: "A".into(), semantic_label: "X".into() },
            ClassEntry { id: 1, name: "A".into(), semantic_label: "X".into() },
        ];
        assert!(ClassRegistry::new(dup).is_err());
        let unordered = vec![
            ScaleEntry { id: 0, magnification: 20 },
            ScaleEntry { id: 1, magnification: 10 },
        ];
        assert!(ScaleRegistry::new(unordered).is_err());
    }

    #[test]
    fn registries_toml_round_trip_uses_spec_field_names() {
        let regs = Registries::default();
        let text = regs.to_toml().unwrap();
        assert!(text.contains("[[classes]]"));
        assert!(text.contains("semantic_label = \"MV\""));
        assert!(text.contains("[[scales]]"));
        assert!(text.contains("magnification = 40"));
        assert_eq!(Registries::from_toml(&text).unwrap(), regs);

        let bad = text.replace("id = 3\nname = \"DT\"", "id = 9\nname = \"DT\"");
        assert!(Registries::from_toml(&bad).is_err());
    }

    #[test]
    fn sample_rejects_mismatched_dims() {
        let image = Patch::filled(4, 4, [0.5; 3]);
        let mask = Mask::zeros(4, 5);
        assert!(Sample::new(image, mask, 0, 0, Source::Synthetic, Split::Train).is_err());
    }

    #[test]
    fn enum_text_round_trip() {
        for s in [Split::Train, Split::Val, Split::Test] {
            assert_eq!(s.to_string().parse::<Split>().unwrap(), s);
        }
        assert_eq!("hubmap".parse::<Source>().unwrap(), Source::Hubmap);
        assert!("elsewhere".parse::<Source>().is_err());
    }

    proptest! {
        #[test]
        fn one_hot_properties(m in 1usize..32, seed in 0usize..1000) {
            let i = seed % m;
            let code = encode_task(i, m).unwrap();
            prop_assert_eq!(code.as_slice().iter().sum::<f64>(), 1.0);
            let argmax = code
                .as_slice()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            prop_assert_eq!(argmax, i);
            prop_assert_eq!(code.decode(), i);
            let j = (i + 1) % m;
            if j != i {
                prop_assert_ne!(code, encode_task(j, m).unwrap());
            }
            let scale = encode_scale(i, m).unwrap();
            prop_assert_eq!(scale.decode(), i);
        }
    }
}
