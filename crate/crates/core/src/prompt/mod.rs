//! Two-stage prompting: a rationale stage that reasons over the retrieved
//! context, then an answer stage that sees the same context plus the
//! rationale and replies with a 0.0–9.9 rating. Ablation flags switch off the
//! rationale stage, the street-view image or the textual context.

pub mod gateway;
pub mod parse;
pub mod predict;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binning::{from_bin, BinLabel, BinScale};
use crate::retrieval::GeoContext;
use crate::seed::sha256_hex;
use crate::task::IndicatorTask;

pub use gateway::{Gateway, GatewayError, ModelConfig, ModelProvider, ModelResponse, TruthMap};
pub use parse::{parse_bin_answer, ParseError};
pub use predict::{predict_sample, PredictError, PredictOptions, PredictionFragment, TranscriptEntry};

pub const TEMPLATE_VERSION: &str = "v1";

const RATIONALE_SYSTEM: &str = include_str!("../../templates/v1/rationale_system.txt");
const RATIONALE_USER: &str = include_str!("../../templates/v1/rationale_user.txt");
const ANSWER_SYSTEM: &str = include_str!("../../templates/v1/answer_system.txt");
const ANSWER_USER: &str = include_str!("../../templates/v1/answer_user.txt");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PromptError {
    #[error("rationale prompt requested with chain-of-thought disabled")]
    CotDisabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_cot: bool,
    pub use_streetview: bool,
    pub use_text: bool,
}

impl AblationFlags {
    pub const FULL: AblationFlags = AblationFlags { use_cot: true, use_streetview: true, use_text: true };

    /// Number of disabled components.
    pub fn disabled(&self) -> usize {
        [self.use_cot, self.use_streetview, self.use_text].iter().filter(|on| !**on).count()
    }
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Preset {
    Full,
    #[serde(rename = "WithoutCOT")]
    WithoutCot,
    WithoutStreetview,
    #[serde(rename = "WithoutTEXT")]
    WithoutText,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Full, Preset::WithoutCot, Preset::WithoutStreetview, Preset::WithoutText];

    pub fn flags(self) -> AblationFlags {
        let full = AblationFlags::FULL;
        match self {
            Preset::Full => full,
            Preset::WithoutCot => AblationFlags { use_cot: false, ..full },
            Preset::WithoutStreetview => AblationFlags { use_streetview: false, ..full },
            Preset::WithoutText => AblationFlags { use_text: false, ..full },
        }
    }

    /// Column header used in the ablation table.
    pub fn name(self) -> &'static str {
        match self {
            Preset::Full => "Full",
            Preset::WithoutCot => "WithoutCOT",
            Preset::WithoutStreetview => "WithoutStreetview",
            Preset::WithoutText => "WithoutTEXT",
        }
    }

    /// Command-line spelling.
    pub fn cli_name(self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::WithoutCot => "no-cot",
            Preset::WithoutStreetview => "no-svi",
            Preset::WithoutText => "no-text",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.cli_name().eq_ignore_ascii_case(s) || p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown preset {s:?} (expected full, no-cot, no-svi or no-text)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Rationale,
    Answer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    /// Metadata for routing and audit; never sent to a remote model.
    pub sample_id: String,
    pub task: IndicatorTask,
    pub stage: Stage,
    pub flags: AblationFlags,
    pub system_text: String,
    pub user_text: String,
    /// Image paths relative to the retrieval cache directory.
    pub image_attachments: Vec<String>,
    pub template_version: String,
}

impl PromptBundle {
    /// Digest of the full bundle, recorded for audit.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_vec(self).expect("bundle serializes"))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Rationale {
    pub text: String,
    pub token_count: usize,
    pub model_id: String,
    pub latency_ms: u64,
}

impl Rationale {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }
}

fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in vars {
        out = out.replace(&format!("{{{{{key}}}}}"), value);
    }
    out
}

fn context_block(ctx: &GeoContext, flags: AblationFlags, with_images: bool) -> (String, Vec<String>) {
    let mut lines = vec![format!("- Coordinates: latitude {:.6}, longitude {:.6}", ctx.point.lat(), ctx.point.lon())];
    if flags.use_text {
        lines.push(format!("- Address: {}", ctx.address.display_name));
        if ctx.nearby.is_empty() {
            lines.push("- Nearby places: none found".to_string());
        } else {
            lines.push("- Nearby places (nearest first):".to_string());
            for (i, place) in ctx.nearby.iter().enumerate() {
                let category = place.category.as_deref().map(|c| format!(" ({c})")).unwrap_or_default();
                lines.push(format!("  {}. {}{category}, {:.0} m", i + 1, place.name, place.distance_m));
            }
        }
    }
    let mut images = Vec::new();
    if flags.use_streetview && with_images {
        match (&ctx.image.local_path, ctx.image.is_available()) {
            (Some(path), true) => {
                lines.push(format!("- Street view image: attached, taken {:.0} m from the location", ctx.image.offset_m));
                images.push(path.clone());
            }
            _ => lines.push("- Street view image: not available".to_string()),
        }
    }
    (lines.join("\n"), images)
}

fn format_anchor(value: f64, unit: &str) -> String {
    let magnitude = value.abs();
    let number = if magnitude >= 100.0 {
        format!("{value:.0}")
    } else if magnitude >= 1.0 {
        format!("{value:.1}")
    } else {
        format!("{value:.3}")
    };
    format!("{number} {unit}")
}

/// Rationale-stage prompt. Coordinates are always present; address and
/// places only with `use_text`; the image only with `use_streetview`.
pub fn render_rationale_prompt(
    ctx: &GeoContext,
    task: IndicatorTask,
    flags: AblationFlags,
) -> Result<PromptBundle, PromptError> {
    if !flags.use_cot {
        return Err(PromptError::CotDisabled);
    }
    let (context, images) = context_block(ctx, flags, true);
    let user_text = fill(
        RATIONALE_USER,
        &[("task_label", task.indicator_name()), ("task_description", task.description()), ("context", &context)],
    );
    Ok(PromptBundle {
        sample_id: ctx.point.id.clone(),
        task,
        stage: Stage::Rationale,
        flags,
        system_text: RATIONALE_SYSTEM.trim_end().to_string(),
        user_text,
        image_attachments: images,
        template_version: TEMPLATE_VERSION.to_string(),
    })
}

pub fn render_answer_prompt(
    ctx: &GeoContext,
    rationale: &Rationale,
    task: IndicatorTask,
    scale: &BinScale,
    flags: AblationFlags,
) -> PromptBundle {
    render_answer_prompt_with(ctx, rationale, task, scale, flags, true)
}

/// Answer-stage prompt; `with_images = false` withholds the street-view
/// image from this stage even when `use_streetview` is set.
pub fn render_answer_prompt_with(
    ctx: &GeoContext,
    rationale: &Rationale,
    task: IndicatorTask,
    scale: &BinScale,
    flags: AblationFlags,
    with_images: bool,
) -> PromptBundle {
    let (context, images) = context_block(ctx, flags, with_images);
    let rationale_block =
        if flags.use_cot { format!("\nRationale\n{}\n", rationale.text.trim_end()) } else { String::new() };
    let anchor = |i: usize| format_anchor(from_bin(scale, BinLabel::from_index(i).expect("index in range")), task.unit());
    let user_text = fill(
        ANSWER_USER,
        &[
            ("task_label", task.indicator_name()),
            ("task_description", task.description()),
            ("context", &context),
            ("rationale_block", &rationale_block),
            ("anchor_low", &anchor(0)),
            ("anchor_mid", &anchor(50)),
            ("anchor_high", &anchor(99)),
        ],
    );
    PromptBundle {
        sample_id: ctx.point.id.clone(),
        task,
        stage: Stage::Answer,
        flags,
        system_text: ANSWER_SYSTEM.trim_end().to_string(),
        user_text,
        image_attachments: images,
        template_version: TEMPLATE_VERSION.to_string(),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::binning::fit_bin_scale;
    use crate::geo::GeoPoint;
    use crate::retrieval::{Address, ImageRef, ImageStatus, NearbyPlace};
    use chrono::TimeZone;
    use indexmap::IndexMap;

    pub(crate) fn sample_context(available: bool) -> GeoContext {
        let point = GeoPoint::new("tokyo-0001", 35.6586, 139.7454).unwrap();
        let mut components = IndexMap::new();
        components.insert("road".to_string(), "Tokyo Tower Dori".to_string());
        components.insert("city".to_string(), "Minato".to_string());
        GeoContext {
            address: Address {
                display_name: "4 Chome-2-8 Shibakoen, Minato City, Tokyo 105-0011, Japan".into(),
                components,
                provider: "nominatim".into(),
                retrieved_at: chrono::Utc.with_ymd_and_hms(2024, 5, 1, 12, 0, 0).unwrap(),
            },
            nearby: vec![
                NearbyPlace {
                    name: "Tokyo Tower".into(),
                    location: GeoPoint::new("osm:node/1", 35.65858, 139.74543).unwrap(),
                    distance_m: 2.3,
                    category: Some("tourism=attraction".into()),
                },
                NearbyPlace {
                    name: "Zojoji Temple".into(),
                    location: GeoPoint::new("osm:node/2", 35.6574, 139.7482).unwrap(),
                    distance_m: 286.0,
                    category: None,
                },
            ],
            image: ImageRef {
                status: if available { ImageStatus::Available } else { ImageStatus::Missing },
                local_path: available.then(|| "img/abc.jpg".to_string()),
                capture_point: point.clone(),
                offset_m: 0.0,
                heading: 0.0,
                content_hash: available.then(|| "abc".to_string()),
                pano_id: None,
                probes: 1,
            },
            point,
        }
    }

    pub(crate) fn sample_scale() -> BinScale {
        let values: Vec<f64> = (0..200).map(|i| 100.0 + 50.0 * i as f64).collect();
        fit_bin_scale(&values, IndicatorTask::Population).unwrap()
    }

    #[test]
    fn rationale_full_flags() {
        let ctx = sample_context(true);
        let b = render_rationale_prompt(&ctx, IndicatorTask::Population, AblationFlags::FULL).unwrap();
        assert_eq!(b.image_attachments, vec!["img/abc.jpg"]);
        assert!(b.user_text.contains(&ctx.address.display_name));
        assert!(b.user_text.contains("latitude 35.658600, longitude 139.745400"));
        assert!(b.user_text.contains("step by step"));
        assert_eq!(b.stage, Stage::Rationale);
    }

    #[test]
    fn rationale_requires_cot() {
        let ctx = sample_context(true);
        let r = render_rationale_prompt(&ctx, IndicatorTask::Ndvi, Preset::WithoutCot.flags());
        assert_eq!(r, Err(PromptError::CotDisabled));
    }

    #[test]
    fn without_text_and_without_streetview() {
        let ctx = sample_context(true);
        let b = render_rationale_prompt(&ctx, IndicatorTask::Ndvi, Preset::WithoutText.flags()).unwrap();
        assert!(!b.user_text.contains(&ctx.address.display_name));
        assert!(ctx.nearby.iter().all(|p| !b.user_text.contains(&p.name)));
        assert!(b.user_text.contains("latitude 35.658600"));
        let b = render_rationale_prompt(&ctx, IndicatorTask::Ndvi, Preset::WithoutStreetview.flags()).unwrap();
        assert!(b.image_attachments.is_empty());
        assert!(!b.user_text.contains("Street view"));
    }

    #[test]
    fn answer_prompt_contracts() {
        let ctx = sample_context(true);
        let scale = sample_scale();
        let rationale = Rationale { text: "Dense towers and a major landmark suggest high density.".into(), ..Default::default() };
        for preset in Preset::ALL {
            let flags = preset.flags();
            let r = if flags.use_cot { rationale.clone() } else { Rationale::empty() };
            let b = render_answer_prompt(&ctx, &r, IndicatorTask::Population, &scale, flags);
            assert!(b.user_text.contains("0.0") && b.user_text.contains("9.9"));
            assert_eq!(b.user_text.contains(&rationale.text), flags.use_cot);
            assert_eq!(b.image_attachments.is_empty(), !flags.use_streetview);
        }
        let b = render_answer_prompt_with(&ctx, &rationale, IndicatorTask::Population, &scale, AblationFlags::FULL, false);
        assert!(b.image_attachments.is_empty());
    }

    #[test]
    fn rendering_is_deterministic() {
        let ctx = sample_context(true);
        let a = render_rationale_prompt(&ctx, IndicatorTask::Health, AblationFlags::FULL).unwrap();
        let b = render_rationale_prompt(&ctx, IndicatorTask::Health, AblationFlags::FULL).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn preset_names() {
        for p in Preset::ALL {
            assert_eq!(p.cli_name().parse::<Preset>().unwrap(), p);
            assert_eq!(p.flags().disabled(), usize::from(p != Preset::Full));
        }
        assert_eq!(serde_json::to_string(&Preset::WithoutCot).unwrap(), "\"WithoutCOT\"");
    }
}
