use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    ScpCode,
    Noise,
    InfarctionStage,
    ExtraSystole,
    HeartAxis,
    NumericFeature,
}

impl Family {
    /// Noun used by choose-type questions ("Which noise does ...").
    pub fn noun(self) -> &'static str {
        match self {
            Family::ScpCode => "finding",
            Family::Noise => "noise",
            Family::InfarctionStage => "infarction stage",
            Family::ExtraSystole => "extra systole",
            Family::HeartAxis => "axis",
            Family::NumericFeature => "feature",
        }
    }
}

/// The signal transform that realises an attribute.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motif {
    FirstDegreeAvBlock,
    AtrialFibrillation,
    BundleBranchBlock,
    StElevation,
    TWaveInversion,
    LowQrsVoltage,
    LeftVentricularHypertrophy,
    ProlongedQt,
    BaselineDrift,
    StaticNoise,
    BurstNoise,
    ElectrodeArtifacts,
    VentricularExtrasystole,
    SupraventricularExtrasystole,
    HeartAxis,
    HeartRate,
    InfarctionStage,
}

impl Motif {
    pub const ALL: [Motif; 17] = [
        Motif::FirstDegreeAvBlock,
        Motif::AtrialFibrillation,
        Motif::BundleBranchBlock,
        Motif::StElevation,
        Motif::TWaveInversion,
        Motif::LowQrsVoltage,
        Motif::LeftVentricularHypertrophy,
        Motif::ProlongedQt,
        Motif::BaselineDrift,
        Motif::StaticNoise,
        Motif::BurstNoise,
        Motif::ElectrodeArtifacts,
        Motif::VentricularExtrasystole,
        Motif::SupraventricularExtrasystole,
        Motif::HeartAxis,
        Motif::HeartRate,
        Motif::InfarctionStage,
    ];

    /// Application order when several motifs are present: rhythm and
    /// geometry first, then morphology, ectopic beats and finally noise.
    pub fn stage(self) -> u8 {
        match self {
            Motif::HeartRate | Motif::HeartAxis => 0,
            Motif::AtrialFibrillation => 1,
            Motif::VentricularExtrasystole | Motif::SupraventricularExtrasystole => 3,
            Motif::BaselineDrift
            | Motif::StaticNoise
            | Motif::BurstNoise
            | Motif::ElectrodeArtifacts => 4,
            _ => 2,
        }
    }

    fn describe(self) -> AttributeSpec {
        use Family::*;
        let (key, name, family) = match self {
            Motif::FirstDegreeAvBlock => ("first_degree_av_block", "first degree AV block", ScpCode),
            Motif::AtrialFibrillation => ("atrial_fibrillation", "atrial fibrillation", ScpCode),
            Motif::BundleBranchBlock => ("bundle_branch_block", "bundle branch block", ScpCode),
            Motif::StElevation => ("st_elevation", "ST elevation", ScpCode),
            Motif::TWaveInversion => ("t_wave_inversion", "T wave inversion", ScpCode),
            Motif::LowQrsVoltage => ("low_qrs_voltage", "low QRS voltage", ScpCode),
            Motif::LeftVentricularHypertrophy => {
                ("left_ventricular_hypertrophy", "left ventricular hypertrophy", ScpCode)
            }
            Motif::ProlongedQt => ("prolonged_qt", "prolonged QT", ScpCode),
            Motif::BaselineDrift => ("baseline_drift", "baseline drift", Noise),
            Motif::StaticNoise => ("static_noise", "static noise", Noise),
            Motif::BurstNoise => ("burst_noise", "burst noise", Noise),
            Motif::ElectrodeArtifacts => ("electrode_artifacts", "electrode artifacts", Noise),
            Motif::VentricularExtrasystole => {
                ("ventricular_extrasystole", "ventricular extrasystole", ExtraSystole)
            }
            Motif::SupraventricularExtrasystole => {
                ("supraventricular_extrasystole", "supraventricular extrasystole", ExtraSystole)
            }
            Motif::HeartAxis => ("heart_axis", "heart axis", HeartAxis),
            Motif::HeartRate => ("heart_rate", "heart rate", NumericFeature),
            Motif::InfarctionStage => ("infarction_stage", "stage of infarction", InfarctionStage),
        };
        let values: &[&str] = match self {
            Motif::HeartAxis => &["normal axis", "left axis deviation", "right axis deviation"],
            Motif::HeartRate => &["low", "normal", "high"],
            Motif::InfarctionStage => &["no infarction", "early stage", "old stage"],
            _ => &[],
        };
        let default_value = if self == Motif::HeartRate { 1 } else { 0 };
        AttributeSpec {
            id: 0,
            key: key.to_string(),
            name: name.to_string(),
            family,
            motif: self,
            values: values.iter().map(|s| s.to_string()).collect(),
            default_value,
        }
    }
}

/// One attribute of the synthetic corpus. Presence attributes have an empty
/// value domain; valued attributes answer query-type questions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub id: usize,
    pub key: String,
    pub name: String,
    pub family: Family,
    pub motif: Motif,
    pub values: Vec<String>,
    pub default_value: usize,
}

impl AttributeSpec {
    pub fn is_valued(&self) -> bool {
        !self.values.is_empty()
    }

    /// Vocabulary concept token describing this attribute (or one of its values).
    pub fn concept(&self, value: Option<usize>) -> String {
        match value {
            None => format!("<{}>", self.key),
            Some(v) => format!("<{}={}>", self.key, self.values[v].replace(' ', "_")),
        }
    }
}

/// Pairs that never co-occur in one record.
const CONFLICTS: [(Motif, Motif); 3] = [
    (Motif::AtrialFibrillation, Motif::FirstDegreeAvBlock),
    (Motif::LowQrsVoltage, Motif::LeftVentricularHypertrophy),
    (Motif::TWaveInversion, Motif::ProlongedQt),
];

pub fn conflicts(a: Motif, b: Motif) -> bool {
    CONFLICTS.iter().any(|&(x, y)| (x, y) == (a, b) || (y, x) == (a, b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeRegistry {
    attributes: Vec<AttributeSpec>,
}

impl AttributeRegistry {
    pub fn new(motifs: &[Motif]) -> Result<Self> {
        let mut attributes = Vec::with_capacity(motifs.len());
        for (id, &m) in motifs.iter().enumerate() {
            if motifs[..id].contains(&m) {
                return Err(Error::Generation(format!("duplicate attribute {m:?}")));
            }
            attributes.push(AttributeSpec { id, ..m.describe() });
        }
        Ok(Self { attributes })
    }

    pub fn standard() -> Self {
        Self::new(&Motif::ALL).expect("motif list has no duplicates")
    }

    pub fn get(&self, id: usize) -> Result<&AttributeSpec> {
        self.attributes.get(id).ok_or(Error::UnknownAttribute(id))
    }

    pub fn by_motif(&self, motif: Motif) -> Option<&AttributeSpec> {
        self.attributes.iter().find(|a| a.motif == motif)
    }

    pub fn iter(&self) -> impl Iterator<Item = &AttributeSpec> {
        self.attributes.iter()
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn families(&self) -> Vec<Family> {
        let mut f: Vec<Family> = self.attributes.iter().map(|a| a.family).collect();
        f.sort();
        f.dedup();
        f
    }

    /// Concept tokens for every attribute and value, in id order.
    pub fn concepts(&self) -> Vec<String> {
        let mut out = Vec::new();
        for a in &self.attributes {
            if a.is_valued() {
                out.extend((0..a.values.len()).map(|v| a.concept(Some(v))));
            } else {
                out.push(a.concept(None));
            }
        }
        out
    }
}
