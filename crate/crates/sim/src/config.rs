//! Declarative environment configuration, loaded from TOML.
//!
//! Everything has a sensible default; a config file only overrides. Unknown
//! keys are rejected so typos fail loudly.

use crate::camera::{default_cameras, Camera, DEFAULT_RESOLUTION};
use crate::error::{Result, SimError};
use crate::geometry::{v3, Aabb};
use crate::scene::{ObjKind, SceneObject};
use crate::task::{default_templates, fill_template, TaskKind};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Square image side length shared by all cameras.
    pub resolution: usize,
    /// Half-width of the uniform per-episode layout shift, in meters.
    pub jitter: f64,
    /// Camera overrides; empty means the built-in four-camera rig.
    pub cameras: Vec<CameraConfig>,
    /// Extra static boxes added to every scene.
    pub objects: Vec<ObjectConfig>,
    /// Instruction template overrides keyed by task name.
    pub templates: BTreeMap<String, Vec<String>>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            resolution: DEFAULT_RESOLUTION,
            jitter: 0.03,
            cameras: Vec::new(),
            objects: Vec::new(),
            templates: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub name: String,
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub focal_scale: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectConfig {
    pub kind: String,
    pub name: String,
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub color: [f64; 3],
    #[serde(default)]
    pub solid: bool,
}

fn one_line(e: impl std::fmt::Display) -> String {
    format!("{e}").split_whitespace().collect::<Vec<_>>().join(" ")
}

impl SimConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: SimConfig = toml::from_str(s).map_err(|e| SimError::Config(one_line(e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Config(format!("read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(8..=512).contains(&self.resolution) {
            return Err(SimError::Config(format!(
                "resolution {} outside [8, 512]",
                self.resolution
            )));
        }
        if !(0.0..=0.05).contains(&self.jitter) {
            return Err(SimError::Config(format!("jitter {} outside [0, 0.05]", self.jitter)));
        }
        if !self.cameras.is_empty() {
            if self.cameras.len() != 4 {
                return Err(SimError::Config(format!(
                    "camera override must list exactly 4 cameras, got {}",
                    self.cameras.len()
                )));
            }
            let mut names: Vec<_> = self.cameras.iter().map(|c| c.name.as_str()).collect();
            names.sort_unstable();
            names.dedup();
            if names.len() != 4 {
                return Err(SimError::Config("camera names must be distinct".into()));
            }
        }
        for (task, templates) in &self.templates {
            let kind = TaskKind::parse(task).map_err(|e| SimError::Config(one_line(e)))?;
            if templates.is_empty() {
                return Err(SimError::Config(format!("task {task} template list is empty")));
            }
            for t in templates {
                for v in 0..kind.variation_count() {
                    fill_template(kind, v, t)?;
                }
            }
        }
        self.extra_objects()?;
        Ok(())
    }

    /// The camera rig: either the built-in four or the configured override.
    pub fn camera_rig(&self) -> Vec<Camera> {
        if self.cameras.is_empty() {
            return default_cameras(self.resolution).to_vec();
        }
        self.cameras
            .iter()
            .map(|c| {
                let mut cam = Camera::new(
                    &c.name,
                    v3(c.position[0], c.position[1], c.position[2]),
                    v3(c.look_at[0], c.look_at[1], c.look_at[2]),
                    self.resolution,
                );
                if let Some(f) = c.focal_scale {
                    cam.focal_scale = f;
                }
                cam
            })
            .collect()
    }

    pub fn templates_for(&self, kind: TaskKind) -> Vec<String> {
        match self.templates.get(kind.name()) {
            Some(t) => t.clone(),
            None => default_templates(kind).iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn extra_objects(&self) -> Result<Vec<SceneObject>> {
        self.objects
            .iter()
            .map(|o| {
                let kind = ObjKind::parse(&o.kind)?;
                SceneObject::new(
                    kind,
                    o.name.clone(),
                    Aabb::new(v3(o.min[0], o.min[1], o.min[2]), v3(o.max[0], o.max[1], o.max[2])),
                    o.color,
                    false,
                    o.solid,
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::ALL_TASKS;

    #[test]
    fn defaults_validate_and_give_four_cameras() {
        let cfg = SimConfig::default();
        cfg.validate().unwrap();
        let rig = cfg.camera_rig();
        assert_eq!(rig.len(), 4);
        assert_eq!(rig[0].resolution, DEFAULT_RESOLUTION);
        for kind in ALL_TASKS {
            assert!(!cfg.templates_for(kind).is_empty());
        }
    }

    #[test]
    fn toml_roundtrip_preserves_settings() {
        let text = r#"
resolution = 64
jitter = 0.01

[[objects]]
kind = "block"
name = "decoration"
min = [0.05, 0.05, 0.10]
max = [0.09, 0.09, 0.14]
color = [0.2, 0.2, 0.2]

[templates]
press_button = ["tap the {color} button"]
"#;
        let cfg = SimConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.resolution, 64);
        assert_eq!(cfg.extra_objects().unwrap().len(), 1);
        assert_eq!(
            cfg.templates_for(TaskKind::PressButton),
            vec!["tap the {color} button".to_string()]
        );
        let back = toml::to_string(&cfg).unwrap();
        let again = SimConfig::from_toml_str(&back).unwrap();
        assert_eq!(again.resolution, 64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(SimConfig::from_toml_str("resolutoin = 64").is_err());
    }

    #[test]
    fn bad_camera_count_is_rejected() {
        let text = r#"
[[cameras]]
name = "solo"
position = [0.5, -0.8, 0.6]
look_at = [0.5, 0.5, 0.2]
"#;
        assert!(SimConfig::from_toml_str(text).is_err());
    }

    #[test]
    fn template_with_unknown_slot_is_rejected() {
        let text = r#"
[templates]
press_button = ["press the {shape} button"]
"#;
        assert!(SimConfig::from_toml_str(text).is_err());
    }

    #[test]
    fn out_of_workspace_extra_object_is_rejected() {
        let text = r#"
[[objects]]
kind = "block"
name = "oob"
min = [0.9, 0.9, 0.9]
max = [1.2, 1.0, 1.0]
color = [0.5, 0.5, 0.5]
"#;
        assert!(SimConfig::from_toml_str(text).is_err());
    }
}
