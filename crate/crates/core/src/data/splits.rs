//! Open-vocabulary fold splits.
//!
//! Category lists are the standard benchmark lists for PASCAL-5ⁱ,
//! COCO-20ⁱ and the COCO-20ⁱ → PASCAL VOC transfer setting, including the
//! original spellings (`tv/monitor` in PASCAL-5ⁱ, `tvmonitor` in the others).

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{FusionerError, Result};

pub const PASCAL_5I: [[&str; 5]; 4] = [
    ["aeroplane", "bicycle", "bird", "boat", "bottle"],
    ["bus", "car", "cat", "chair", "cow"],
    ["diningtable", "dog", "horse", "motorbike", "person"],
    ["pottedplant", "sheep", "sofa", "train", "tv/monitor"],
];

pub const COCO_20I: [[&str; 20]; 4] = [
    [
        "person",
        "aeroplane",
        "boat",
        "parkingmeter",
        "dog",
        "elephant",
        "backpack",
        "suitcase",
        "sportsball",
        "skateboard",
        "wineglass",
        "spoon",
        "sandwich",
        "hotdog",
        "chair",
        "diningtable",
        "mouse",
        "microwave",
        "refrigerator",
        "scissors",
    ],
    [
        "bicycle",
        "bus",
        "trafficlight",
        "bench",
        "horse",
        "bear",
        "umbrella",
        "frisbee",
        "kite",
        "surfboard",
        "cup",
        "bowl",
        "orange",
        "pizza",
        "sofa",
        "toilet",
        "remote",
        "oven",
        "book",
        "teddybear",
    ],
    [
        "car",
        "train",
        "firehydrant",
        "bird",
        "sheep",
        "zebra",
        "handbag",
        "skis",
        "baseballbat",
        "tennisracket",
        "fork",
        "banana",
        "broccoli",
        "donut",
        "pottedplant",
        "tvmonitor",
        "keyboard",
        "toaster",
        "clock",
        "hairdrier",
    ],
    [
        "motorbike",
        "truck",
        "stopsign",
        "cat",
        "cow",
        "giraffe",
        "tie",
        "snowboard",
        "baseballglove",
        "bottle",
        "knife",
        "apple",
        "carrot",
        "cake",
        "bed",
        "laptop",
        "cellphone",
        "sink",
        "vase",
        "toothbrush",
    ],
];

/// PASCAL VOC classes that are novel after training on COCO-20ⁱ fold `i`.
pub const COCO_TO_PASCAL: [&[&str]; 4] = [
    &["aeroplane", "boat", "chair", "diningtable", "dog", "person"],
    &["bicycle", "bus", "horse", "sofa"],
    &["bird", "car", "pottedplant", "sheep", "train", "tvmonitor"],
    &["bottle", "cat", "cow", "motorbike"],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitScheme {
    Pascal5i,
    Coco20i,
    TransferCocoToPascal,
    /// FSS-1000 style: categories come from the dataset itself.
    Fss1000,
    /// Test categories listed in the run configuration.
    Custom,
}

impl SplitScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pascal5i => "pascal5i",
            Self::Coco20i => "coco20i",
            Self::TransferCocoToPascal => "transfer_coco_to_pascal",
            Self::Fss1000 => "fss1000",
            Self::Custom => "custom",
        }
    }

    /// Column labels used in fold tables, e.g. `5^0`.
    pub fn fold_label(self, fold: usize) -> String {
        match self {
            Self::Pascal5i => format!("5^{fold}"),
            Self::Coco20i | Self::TransferCocoToPascal => format!("20^{fold}"),
            Self::Fss1000 | Self::Custom => format!("fold{fold}"),
        }
    }
}

impl fmt::Display for SplitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitScheme {
    type Err = FusionerError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pascal5i" => Ok(Self::Pascal5i),
            "coco20i" => Ok(Self::Coco20i),
            "transfer_coco_to_pascal" => Ok(Self::TransferCocoToPascal),
            "fss1000" => Ok(Self::Fss1000),
            "custom" => Ok(Self::Custom),
            other => Err(FusionerError::invalid(format!("unknown split scheme `{other}`"))),
        }
    }
}

/// Disjoint train and test vocabularies for one fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub scheme: SplitScheme,
    pub fold: usize,
    pub train_categories: Vec<String>,
    pub test_categories: Vec<String>,
}

fn owned(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

pub fn pascal_universe() -> Vec<String> {
    PASCAL_5I.iter().flatten().map(|s| s.to_string()).collect()
}

pub fn coco_universe() -> Vec<String> {
    COCO_20I.iter().flatten().map(|s| s.to_string()).collect()
}

impl FoldSplit {
    /// Builds a split from a universe and the held-out test list; train is the
    /// universe minus test, in universe order.
    pub fn from_universe(scheme: SplitScheme, fold: usize, universe: &[String], test: Vec<String>) -> Result<Self> {
        let test_set: HashSet<&str> = test.iter().map(String::as_str).collect();
        if test_set.len() != test.len() {
            return Err(FusionerError::invalid("duplicate test category"));
        }
        let universe_set: HashSet<&str> = universe.iter().map(String::as_str).collect();
        if let Some(missing) = test.iter().find(|c| !universe_set.contains(c.as_str())) {
            return Err(FusionerError::invalid(format!(
                "test category `{missing}` is not in the category universe"
            )));
        }
        let train = universe
            .iter()
            .filter(|c| !test_set.contains(c.as_str()))
            .cloned()
            .collect();
        let split = Self {
            scheme,
            fold,
            train_categories: train,
            test_categories: test,
        };
        split.check_disjoint()?;
        Ok(split)
    }

    /// Hard failure if any category is both seen and unseen.
    pub fn check_disjoint(&self) -> Result<()> {
        let train: HashSet<&str> = self.train_categories.iter().map(String::as_str).collect();
        if let Some(c) = self.test_categories.iter().find(|c| train.contains(c.as_str())) {
            return Err(FusionerError::invalid(format!(
                "category `{c}` is in both the train and test vocabularies"
            )));
        }
        Ok(())
    }

    pub fn is_train(&self, category: &str) -> bool {
        self.train_categories.iter().any(|c| c == category)
    }

    pub fn is_test(&self, category: &str) -> bool {
        self.test_categories.iter().any(|c| c == category)
    }

    /// Short descriptor such as `pascal5i/0`.
    pub fn descriptor(&self) -> String {
        format!("{}/{}", self.scheme, self.fold)
    }
}

/// The benchmark category lists for the fixed-vocabulary schemes.
pub fn build_fold_split(scheme: SplitScheme, fold: usize) -> Result<FoldSplit> {
    if fold > 3 {
        return Err(FusionerError::invalid(format!(
            "fold {fold} is out of range for {scheme} (expected 0..=3)"
        )));
    }
    match scheme {
        SplitScheme::Pascal5i => FoldSplit::from_universe(scheme, fold, &pascal_universe(), owned(&PASCAL_5I[fold])),
        SplitScheme::Coco20i => FoldSplit::from_universe(scheme, fold, &coco_universe(), owned(&COCO_20I[fold])),
        SplitScheme::TransferCocoToPascal => {
            let coco = FoldSplit::from_universe(SplitScheme::Coco20i, fold, &coco_universe(), owned(&COCO_20I[fold]))?;
            let split = FoldSplit {
                scheme,
                fold,
                train_categories: coco.train_categories,
                test_categories: owned(COCO_TO_PASCAL[fold]),
            };
            split.check_disjoint()?;
            Ok(split)
        }
        SplitScheme::Fss1000 | SplitScheme::Custom => Err(FusionerError::invalid(format!(
            "scheme {scheme} has no fixed vocabulary; build it from a dataset with FoldSplit::from_universe"
        ))),
    }
}

/// A cross-validation table: a universe partitioned into held-out folds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldTable {
    pub scheme: SplitScheme,
    pub universe: Vec<String>,
    pub folds: Vec<Vec<String>>,
}

impl FoldTable {
    pub fn for_scheme(scheme: SplitScheme) -> Result<Self> {
        match scheme {
            SplitScheme::Pascal5i => Ok(Self {
                scheme,
                universe: pascal_universe(),
                folds: PASCAL_5I.iter().map(|f| owned(f)).collect(),
            }),
            SplitScheme::Coco20i => Ok(Self {
                scheme,
                universe: coco_universe(),
                folds: COCO_20I.iter().map(|f| owned(f)).collect(),
            }),
            other => Err(FusionerError::invalid(format!(
                "cross-validation is defined for pascal5i and coco20i, not {other}"
            ))),
        }
    }

    /// A custom table; folds must partition the universe.
    pub fn custom(universe: Vec<String>, folds: Vec<Vec<String>>) -> Result<Self> {
        let mut seen = HashSet::new();
        for c in folds.iter().flatten() {
            if !seen.insert(c.as_str()) {
                return Err(FusionerError::invalid(format!("category `{c}` appears in two folds")));
            }
        }
        let table = Self {
            scheme: SplitScheme::Custom,
            universe,
            folds,
        };
        for i in 0..table.folds.len() {
            table.split(i)?;
        }
        Ok(table)
    }

    pub fn split(&self, fold: usize) -> Result<FoldSplit> {
        let test = self
            .folds
            .get(fold)
            .ok_or_else(|| FusionerError::invalid(format!("fold {fold} does not exist")))?;
        FoldSplit::from_universe(self.scheme, fold, &self.universe, test.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pascal_fold0_and_transfer_fold1() {
        let s = build_fold_split(SplitScheme::Pascal5i, 0).unwrap();
        assert_eq!(s.test_categories, ["aeroplane", "bicycle", "bird", "boat", "bottle"]);
        assert_eq!(s.train_categories.len(), 15);
        let t = build_fold_split(SplitScheme::TransferCocoToPascal, 1).unwrap();
        assert_eq!(t.test_categories, ["bicycle", "bus", "horse", "sofa"]);
        assert_eq!(t.train_categories.len(), 60);
    }

    #[test]
    fn every_fixed_split_is_disjoint() {
        for scheme in [
            SplitScheme::Pascal5i,
            SplitScheme::Coco20i,
            SplitScheme::TransferCocoToPascal,
        ] {
            for fold in 0..4 {
                let s = build_fold_split(scheme, fold).unwrap();
                assert!(s.test_categories.iter().all(|c| !s.is_train(c)));
            }
        }
    }

    #[test]
    fn folds_partition_universes() {
        for (scheme, n) in [(SplitScheme::Pascal5i, 20), (SplitScheme::Coco20i, 80)] {
            let table = FoldTable::for_scheme(scheme).unwrap();
            let all: HashSet<&String> = table.folds.iter().flatten().collect();
            assert_eq!(all.len(), n);
            assert_eq!(table.universe.len(), n);
        }
    }

    #[test]
    fn bad_scheme_or_fold() {
        assert!(build_fold_split(SplitScheme::Pascal5i, 4).is_err());
        assert!(build_fold_split(SplitScheme::Fss1000, 0).is_err());
        assert!("pascal".parse::<SplitScheme>().is_err());
        assert!(FoldTable::custom(vec!["a".into(), "b".into()], vec![vec!["a".into()], vec!["a".into()]]).is_err());
    }
}
