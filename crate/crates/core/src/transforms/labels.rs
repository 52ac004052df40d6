use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelMap, Vocabulary};

/// Label relabelling table. IDs absent from `mapping` map to themselves
/// unless `strict` is set; background (0) always maps to itself unless
/// listed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRemap {
    #[serde(with = "label_keys")]
    pub mapping: BTreeMap<u16, u16>,
    #[serde(default)]
    pub description: String,
    /// Vocabulary of the remapped labels.
    pub target_vocabulary: Vocabulary,
    #[serde(default)]
    pub strict: bool,
}

mod label_keys {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<u16, u16>, s: S) -> Result<S::Ok, S::Error> {
        map.iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect::<BTreeMap<String, u16>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<u16, u16>, D::Error> {
        BTreeMap::<String, u16>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| {
                k.trim()
                    .parse::<u16>()
                    .map(|k| (k, v))
                    .map_err(|_| serde::de::Error::custom(format!("mapping key `{k}` is not a label ID")))
            })
            .collect()
    }
}

impl LabelRemap {
    pub fn identity(vocabulary: Vocabulary) -> Self {
        Self {
            mapping: BTreeMap::new(),
            description: "identity".into(),
            target_vocabulary: vocabulary,
            strict: false,
        }
    }

    /// Drops artery (3) and vein (4) from a KiPA-style map, keeping kidney (1)
    /// and tumor (2) under the KiTS vocabulary.
    pub fn kipa_to_kits() -> Self {
        Self {
            mapping: [(3, 0), (4, 0)].into_iter().collect(),
            description: "drop artery and vein, keep kidney and tumor".into(),
            target_vocabulary: Vocabulary::kits(),
            strict: false,
        }
    }

    pub fn destination(&self, label: u16) -> Result<u16> {
        match self.mapping.get(&label) {
            Some(&d) => Ok(d),
            None if label == 0 || !self.strict => Ok(label),
            None => Err(Error::UnknownLabel { label }),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            Ok(serde_json::from_str(&text)?)
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        }
    }
}

/// Voxelwise table lookup; geometry is unchanged and the output carries the
/// remap's target vocabulary.
pub fn remap_labels(labels: &LabelMap, remap: &LabelRemap) -> Result<LabelMap> {
    let present = labels.present_labels();
    let max = present.iter().next_back().copied().unwrap_or(0) as usize;
    let mut lut: Vec<u16> = (0..=max as u16).collect();
    for &src in &present {
        let dst = remap.destination(src)?;
        if !remap.target_vocabulary.contains(dst) {
            return Err(Error::UnknownLabel { label: dst });
        }
        lut[src as usize] = dst;
    }
    let data = labels.data().iter().map(|&l| lut[l as usize]).collect();
    LabelMap::new(*labels.geometry(), data, remap.target_vocabulary.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;
    use proptest::prelude::*;

    fn kipa_map(data: Vec<u16>) -> LabelMap {
        LabelMap::new(
            Geometry::with_dims([data.len(), 1, 1]).unwrap(),
            data,
            Vocabulary::kipa(),
        )
        .unwrap()
    }

    #[test]
    fn kipa_remap_drops_vessels() {
        let labels = kipa_map(vec![0, 1, 1, 2, 3, 3, 4, 4, 4, 2, 1, 0]);
        let out = remap_labels(&labels, &LabelRemap::kipa_to_kits()).unwrap();
        let present: Vec<u16> = out.present_labels().into_iter().collect();
        assert_eq!(present, vec![0, 1, 2]);
        assert_eq!(out.count(1), labels.count(1));
        assert_eq!(out.count(2), labels.count(2));
        assert_eq!(out.vocabulary(), &Vocabulary::kits());
    }

    #[test]
    fn hand_built_remap() {
        let g = Geometry::with_dims([2, 2, 1]).unwrap();
        let labels = LabelMap::new(g, vec![1, 3, 4, 2], Vocabulary::kipa()).unwrap();
        let out = remap_labels(&labels, &LabelRemap::kipa_to_kits()).unwrap();
        assert_eq!(out.data(), &[1, 0, 0, 2]);
        assert_eq!(out.geometry(), labels.geometry());
    }

    #[test]
    fn identity_remap() {
        let labels = kipa_map(vec![0, 4, 3, 2, 1]);
        let out = remap_labels(&labels, &LabelRemap::identity(Vocabulary::kipa())).unwrap();
        assert_eq!(out, labels);
    }

    #[test]
    fn strict_mode_and_destination_checks() {
        let labels = kipa_map(vec![0, 1, 3]);
        let mut strict = LabelRemap::kipa_to_kits();
        strict.strict = true;
        assert!(matches!(
            remap_labels(&labels, &strict),
            Err(Error::UnknownLabel { label: 1 })
        ));
        strict.mapping.insert(1, 1);
        assert!(remap_labels(&labels, &strict).is_ok());

        // Identity-filled artery (3) would land on "cyst" only if named so.
        let mut bad = LabelRemap::kipa_to_kits();
        bad.mapping.insert(1, 9);
        assert!(matches!(
            remap_labels(&labels, &bad),
            Err(Error::UnknownLabel { label: 9 })
        ));
    }

    #[test]
    fn parses_toml() {
        let text = r#"
            description = "kipa"
            mapping = { 3 = 0, 4 = 0 }
            target_vocabulary = { 1 = "kidney", 2 = "tumor", 3 = "cyst" }
        "#;
        let remap: LabelRemap = toml::from_str(text).unwrap();
        assert_eq!(remap.mapping, LabelRemap::kipa_to_kits().mapping);
        assert_eq!(remap.target_vocabulary, Vocabulary::kits());
    }

    proptest! {
        #[test]
        fn per_destination_counts_are_sums(
            data in proptest::collection::vec(0u16..5, 1..300),
            dst in proptest::collection::vec(0u16..4, 5),
        ) {
            let labels = kipa_map(data);
            let remap = LabelRemap {
                mapping: (0..5).zip(dst.iter().copied()).collect(),
                description: String::new(),
                target_vocabulary: Vocabulary::kits(),
                strict: true,
            };
            let out = remap_labels(&labels, &remap).unwrap();
            let src_counts = labels.counts();
            for d in 0..4u16 {
                let want: usize = src_counts.iter().filter(|(s, _)| dst[**s as usize] == d).map(|(_, c)| c).sum();
                prop_assert_eq!(out.count(d), want);
            }
        }
    }
}
