//! View labels, prompt sets, controller configuration strings and the fixed
//! four-view camera rig.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Matrix4, Vector3};
use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use serde::{Deserialize, Serialize};

use crate::encoders::{HiddenTokens, PixelLatent};
use crate::error::{Error, Result};
use crate::image::{ContentHash, ImageTensor};
use crate::nn::{join, Activation, Mlp, ParamInit, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewLabel {
    Front,
    Back,
    Left,
    Right,
}

impl ViewLabel {
    /// Canonical order: front, back, left, right.
    pub const ALL: [ViewLabel; 4] = [ViewLabel::Front, ViewLabel::Back, ViewLabel::Left, ViewLabel::Right];

    pub fn letter(self) -> char {
        match self {
            ViewLabel::Front => 'f',
            ViewLabel::Back => 'b',
            ViewLabel::Left => 'l',
            ViewLabel::Right => 'r',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c {
            'f' => Some(ViewLabel::Front),
            'b' => Some(ViewLabel::Back),
            'l' => Some(ViewLabel::Left),
            'r' => Some(ViewLabel::Right),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ViewLabel::Front => "front",
            ViewLabel::Back => "back",
            ViewLabel::Left => "left",
            ViewLabel::Right => "right",
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }

    /// Azimuth of this label's camera on the rig, in degrees.
    pub fn azimuth(self) -> f64 {
        match self {
            ViewLabel::Front => 0.0,
            ViewLabel::Left => 90.0,
            ViewLabel::Back => 180.0,
            ViewLabel::Right => 270.0,
        }
    }

    /// Slot of this label in the rig (ascending azimuth).
    pub fn rig_slot(self) -> usize {
        RIG_ORDER.iter().position(|l| *l == self).expect("every label is on the rig")
    }
}

impl fmt::Display for ViewLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Labels of the rig slots, by ascending azimuth 0/90/180/270.
pub const RIG_ORDER: [ViewLabel; 4] = [ViewLabel::Front, ViewLabel::Left, ViewLabel::Back, ViewLabel::Right];

/// A subset of view labels, iterated in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ViewSet(u8);

impl ViewSet {
    pub const EMPTY: ViewSet = ViewSet(0);

    pub fn from_labels(labels: impl IntoIterator<Item = ViewLabel>) -> Self {
        ViewSet(labels.into_iter().fold(0, |acc, l| acc | l.bit()))
    }

    pub fn single(label: ViewLabel) -> Self {
        ViewSet(label.bit())
    }

    pub fn contains(self, label: ViewLabel) -> bool {
        self.0 & label.bit() != 0
    }

    pub fn insert(&mut self, label: ViewLabel) {
        self.0 |= label.bit();
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset(self, other: ViewSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn union(self, other: ViewSet) -> ViewSet {
        ViewSet(self.0 | other.0)
    }

    pub fn iter(self) -> impl Iterator<Item = ViewLabel> {
        ViewLabel::ALL.into_iter().filter(move |l| self.contains(*l))
    }

    pub fn letters(self) -> String {
        self.iter().map(ViewLabel::letter).collect()
    }

    /// All 15 nonempty subsets.
    pub fn all_nonempty() -> impl Iterator<Item = ViewSet> {
        (1u8..16).map(ViewSet)
    }

    /// The 8 subsets that contain front.
    pub fn all_with_front() -> impl Iterator<Item = ViewSet> {
        Self::all_nonempty().filter(|s| s.contains(ViewLabel::Front))
    }
}

/// Which prompt views feed the pixel controller and which feed the local
/// controller, written `pixel(<letters>) + local(<letters>)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ControllerConfig {
    pixel_views: ViewSet,
    local_views: ViewSet,
}

impl ControllerConfig {
    pub fn new(pixel_views: ViewSet, local_views: ViewSet) -> Result<Self> {
        for (group, set) in [("pixel", pixel_views), ("local", local_views)] {
            if set.is_empty() {
                return Err(Error::config(format!("{group} views must be nonempty")));
            }
            if !set.contains(ViewLabel::Front) {
                return Err(Error::config(format!("{group} views must include front")));
            }
        }
        Ok(Self {
            pixel_views,
            local_views,
        })
    }

    /// `pixel(f) + local(f)`, the single-image configuration.
    pub fn single_image() -> Self {
        Self {
            pixel_views: ViewSet::single(ViewLabel::Front),
            local_views: ViewSet::single(ViewLabel::Front),
        }
    }

    pub fn pixel_views(&self) -> ViewSet {
        self.pixel_views
    }

    pub fn local_views(&self) -> ViewSet {
        self.local_views
    }

    /// Every label referenced by either controller.
    pub fn required_views(&self) -> ViewSet {
        self.pixel_views.union(self.local_views)
    }

    pub fn is_single_image(&self) -> bool {
        *self == Self::single_image()
    }

    /// All 64 front-containing (pixel, local) combinations.
    pub fn all_front_containing() -> Vec<ControllerConfig> {
        ViewSet::all_with_front()
            .flat_map(|p| ViewSet::all_with_front().map(move |l| ControllerConfig::new(p, l).expect("front present")))
            .collect()
    }
}

impl fmt::Display for ControllerConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pixel({}) + local({})", self.pixel_views.letters(), self.local_views.letters())
    }
}

impl FromStr for ControllerConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_controller_config(s)
    }
}

pub fn parse_controller_config(spec: &str) -> Result<ControllerConfig> {
    let mut parser = ConfigParser { input: spec, rest: spec };
    let pixel = parser.group("pixel")?;
    parser.expect_char('+')?;
    let local = parser.group("local")?;
    parser.skip_ws();
    if !parser.rest.is_empty() {
        return Err(parser.error(parser.rest, "unexpected trailing input"));
    }
    for (name, set) in [("pixel", pixel), ("local", local)] {
        if !set.contains(ViewLabel::Front) {
            return Err(parser.error(&format!("{name}({})", set.letters()), "group must include front (f)"));
        }
    }
    ControllerConfig::new(pixel, local)
}

struct ConfigParser<'a> {
    input: &'a str,
    rest: &'a str,
}

impl<'a> ConfigParser<'a> {
    fn error(&self, token: &str, reason: &str) -> Error {
        Error::Parse {
            input: self.input.to_string(),
            token: token.to_string(),
            reason: reason.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        self.rest = self.rest.trim_start();
    }

    fn next_token(&self) -> &'a str {
        let end = self
            .rest
            .find(|c: char| c.is_whitespace())
            .unwrap_or(self.rest.len());
        if end == 0 {
            "<end of input>"
        } else {
            &self.rest[..end]
        }
    }

    fn expect_char(&mut self, c: char) -> Result<()> {
        self.skip_ws();
        match self.rest.strip_prefix(c) {
            Some(r) => {
                self.rest = r;
                Ok(())
            }
            None => Err(self.error(self.next_token(), &format!("expected `{c}`"))),
        }
    }

    fn group(&mut self, name: &str) -> Result<ViewSet> {
        self.skip_ws();
        let Some(r) = self.rest.strip_prefix(name) else {
            return Err(self.error(self.next_token(), &format!("missing `{name}(...)` group")));
        };
        self.rest = r;
        self.expect_char('(')?;
        let close = self
            .rest
            .find(')')
            .ok_or_else(|| self.error(self.next_token(), &format!("unclosed `{name}(` group")))?;
        let body = &self.rest[..close];
        self.rest = &self.rest[close + 1..];
        let mut set = ViewSet::EMPTY;
        for c in body.chars().filter(|c| !c.is_whitespace()) {
            let label = ViewLabel::from_letter(c)
                .ok_or_else(|| self.error(&c.to_string(), &format!("unknown view letter '{c}'")))?;
            if set.contains(label) {
                return Err(self.error(&c.to_string(), &format!("duplicate view letter '{c}'")));
            }
            set.insert(label);
        }
        if set.is_empty() {
            return Err(self.error(&format!("{name}({body})"), "empty group"));
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Cached<T> {
    source: ContentHash,
    value: T,
}

/// One view-labeled prompt image with optional cached encodings.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePrompt {
    label: ViewLabel,
    rgb: ImageTensor,
    hash: ContentHash,
    pixel_latent: Option<Cached<PixelLatent>>,
    hidden_tokens: Option<Cached<HiddenTokens>>,
}

impl ImagePrompt {
    pub fn new(label: ViewLabel, rgb: ImageTensor) -> Result<Self> {
        if !rgb.is_square() {
            return Err(Error::dim(format!(
                "prompt image must be square, got {}x{}",
                rgb.height(),
                rgb.width()
            )));
        }
        let hash = rgb.content_hash();
        Ok(Self {
            label,
            rgb,
            hash,
            pixel_latent: None,
            hidden_tokens: None,
        })
    }

    pub fn label(&self) -> ViewLabel {
        self.label
    }

    pub fn rgb(&self) -> &ImageTensor {
        &self.rgb
    }

    pub fn content_hash(&self) -> ContentHash {
        self.hash
    }

    /// Attach a pixel latent computed from the image with hash `source`.
    pub fn with_pixel_latent(mut self, latent: PixelLatent, source: ContentHash) -> Result<Self> {
        if source != self.hash {
            return Err(Error::config(format!("pixel latent for {} was computed from a different image", self.label)));
        }
        self.pixel_latent = Some(Cached { source, value: latent });
        Ok(self)
    }

    pub fn with_hidden_tokens(mut self, tokens: HiddenTokens, source: ContentHash) -> Result<Self> {
        if source != self.hash {
            return Err(Error::config(format!("hidden tokens for {} were computed from a different image", self.label)));
        }
        self.hidden_tokens = Some(Cached { source, value: tokens });
        Ok(self)
    }

    pub fn pixel_latent(&self) -> Option<&PixelLatent> {
        self.pixel_latent
            .as_ref()
            .filter(|c| c.source == self.hash)
            .map(|c| &c.value)
    }

    pub fn hidden_tokens(&self) -> Option<&HiddenTokens> {
        self.hidden_tokens
            .as_ref()
            .filter(|c| c.source == self.hash)
            .map(|c| &c.value)
    }
}

/// Ordered, view-labeled collection of 1–4 prompts that always includes front.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    prompts: Vec<ImagePrompt>,
}

impl PromptSet {
    pub fn new(prompts: Vec<ImagePrompt>) -> Result<Self> {
        if prompts.is_empty() || prompts.len() > 4 {
            return Err(Error::config(format!("a prompt set holds 1 to 4 prompts, got {}", prompts.len())));
        }
        let mut seen = ViewSet::EMPTY;
        for p in &prompts {
            if seen.contains(p.label) {
                return Err(Error::config(format!("duplicate prompt label {}", p.label)));
            }
            seen.insert(p.label);
        }
        if !seen.contains(ViewLabel::Front) {
            return Err(Error::config("a prompt set must contain a front prompt"));
        }
        Ok(Self { prompts })
    }

    pub fn single(front: ImagePrompt) -> Result<Self> {
        Self::new(vec![front])
    }

    /// Same prompts, sorted into canonical label order.
    pub fn canonicalized(mut self) -> Self {
        self.prompts.sort_by_key(|p| p.label);
        self
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ImagePrompt> {
        self.prompts.iter()
    }

    pub fn labels(&self) -> ViewSet {
        ViewSet::from_labels(self.prompts.iter().map(|p| p.label))
    }

    pub fn get(&self, label: ViewLabel) -> Option<&ImagePrompt> {
        self.prompts.iter().find(|p| p.label == label)
    }

    pub fn front(&self) -> &ImagePrompt {
        self.get(ViewLabel::Front).expect("validated at construction")
    }

    /// Prompts whose label is in `views`, in this set's order.
    pub fn select(&self, views: ViewSet) -> Vec<&ImagePrompt> {
        self.prompts.iter().filter(|p| views.contains(p.label)).collect()
    }

    pub fn validate(&self, config: &ControllerConfig) -> Result<()> {
        let missing = ViewSet(config.required_views().0 & !self.labels().0);
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!(
                "config `{config}` references views [{}] absent from the prompt set [{}]",
                missing.letters(),
                self.labels().letters()
            )))
        }
    }

    pub fn into_vec(self) -> Vec<ImagePrompt> {
        self.prompts
    }
}

/// World-to-camera pose. The camera looks down its local `-z` axis with `+y`
/// up.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Rig conventions: elevation 0, distance 2.5, vertical field of view 45°.
pub const RIG_RADIUS: f64 = 2.5;
pub const RIG_ELEVATION: f64 = 0.0;
pub const RIG_FOV_Y_DEG: f64 = 45.0;

impl CameraPose {
    /// Camera on a sphere of `radius`, looking at the origin. Azimuth 0 sits
    /// on `+z`; azimuth increases toward `+x`.
    pub fn look_at(azimuth: f64, elevation: f64, radius: f64) -> Self {
        let (az, el) = (azimuth.to_radians(), elevation.to_radians());
        let eye = Vector3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos()) * radius;
        let back = eye.normalize();
        let right = Vector3::y().cross(&back).normalize();
        let up = back.cross(&right);
        let cam_to_world = Matrix3::from_columns(&[right, up, back]);
        let rotation = cam_to_world.transpose();
        let translation = -(rotation * eye);
        Self {
            azimuth,
            elevation,
            radius,
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            azimuth: 0.0,
            elevation: 0.0,
            radius: 0.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Homogeneous 4×4 world-to-camera matrix.
    pub fn extrinsic_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major flattening of the extrinsic matrix.
    pub fn flattened_extrinsics(&self) -> [f64; 16] {
        let m = self.extrinsic_matrix();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn camera_to_world(&self) -> Matrix3<f64> {
        self.rotation.transpose()
    }
}

/// The four orthogonal rig poses at azimuths 0/90/180/270, elevation 0.
pub fn orthogonal_camera_rig() -> [CameraPose; 4] {
    RIG_ORDER.map(rig_pose)
}

pub fn rig_pose(label: ViewLabel) -> CameraPose {
    CameraPose::look_at(label.azimuth(), RIG_ELEVATION, RIG_RADIUS)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraEmbedding {
    pub vector: Array1<f64>,
}

/// Learned adaptor from flattened extrinsics to a conditioning vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraEncoder {
    pub adaptor: Mlp,
}

impl CameraEncoder {
    pub fn init(init: &mut ParamInit, d_cam: usize) -> Self {
        Self {
            adaptor: Mlp::init(init, 16, d_cam, d_cam, Activation::Silu),
        }
    }

    pub fn dim(&self) -> usize {
        self.adaptor.fc2.d_out()
    }

    pub fn embed(&self, pose: &CameraPose) -> CameraEmbedding {
        let flat = Array2::from_shape_vec((1, 16), pose.flattened_extrinsics().to_vec()).expect("16 values");
        let out = self.adaptor.forward(flat.view()).expect("adaptor takes 16 inputs");
        CameraEmbedding {
            vector: out.row(0).to_owned(),
        }
    }

    pub fn embed_rig(&self) -> Vec<CameraEmbedding> {
        orthogonal_camera_rig().iter().map(|p| self.embed(p)).collect()
    }
}

impl Parameters for CameraEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.adaptor.visit(&join(prefix, "adaptor"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.adaptor.visit_mut(&join(prefix, "adaptor"), f);
    }
}
