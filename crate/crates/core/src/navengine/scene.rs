use serde::{Deserialize, Serialize};

use super::{Alert, ClipRecord, NavState};
use crate::segment::SurfaceMesh;
use crate::trackio::{Device, MessageKind, StreamMessage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstrumentView {
    pub device: Device,
    /// Sensor orientation in the reference frame, `(w, x, y, z)`.
    pub q: [f64; 4],
    /// Sensor position in the reference frame, mm.
    pub p: [f64; 3],
    /// Instrument tip in the reference frame, mm.
    pub tip: [f64; 3],
    /// Signed tip-to-tumor distance; negative inside the tumor.
    pub distance_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshPayload {
    /// Flattened `x, y, z` triples, mm, rounded to the micrometre.
    pub vertices: Vec<f64>,
    /// Flattened zero-based index triples.
    pub triangles: Vec<u32>,
}

impl MeshPayload {
    pub fn from_mesh(m: &SurfaceMesh) -> Self {
        MeshPayload {
            vertices: m.vertices.iter().flat_map(|v| [v.x, v.y, v.z]).map(|x| (x * 1000.0).round() / 1000.0).collect(),
            triangles: m.triangles.iter().flatten().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneMeshes {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tumor: Option<MeshPayload>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub margin: Option<MeshPayload>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vessel: Option<MeshPayload>,
    /// Registered preoperative liver; orientation context only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub liver: Option<MeshPayload>,
}

/// Payload of a SCENE_UPDATE message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneUpdate {
    pub state: NavState,
    pub alert: Alert,
    pub margin_mm: f64,
    pub t: f64,
    pub instruments: Vec<InstrumentView>,
    pub clips: Vec<ClipRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meshes: Option<SceneMeshes>,
    /// Present when a preoperative model is loaded; it is never
    /// accuracy-bearing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preop_context_only: Option<bool>,
}

impl SceneUpdate {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("scene update serializes")
    }

    pub fn to_message(&self) -> StreamMessage {
        StreamMessage::text(MessageKind::SceneUpdate, &self.to_json())
    }

    pub fn from_message(msg: &StreamMessage) -> Option<SceneUpdate> {
        if msg.kind != MessageKind::SceneUpdate {
            return None;
        }
        serde_json::from_str(msg.payload_str().ok()?).ok()
    }
}

/// Operator commands, as sent by the browser console.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "lowercase")]
pub enum Command {
    /// Place a virtual instrument sensor at a pose in the reference frame.
    Steer { device: Device, q: [f64; 4], p: [f64; 3] },
    /// Digitize a clip at `position`, or at the pointer tip when absent.
    Clip {
        #[serde(default)]
        position: Option<[f64; 3]>,
    },
    Margin { mm: f64 },
}

impl Command {
    pub fn parse(text: &str) -> Result<Command, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("command serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_wire_forms() {
        assert_eq!(Command::parse(r#"{"cmd":"margin","mm":7}"#).unwrap(), Command::Margin { mm: 7.0 });
        assert_eq!(Command::parse(r#"{"cmd":"clip"}"#).unwrap(), Command::Clip { position: None });
        let steer = Command::parse(r#"{"cmd":"steer","device":"POINTER","q":[1,0,0,0],"p":[1,2,3]}"#).unwrap();
        assert_eq!(steer, Command::Steer { device: Device::Pointer, q: [1.0, 0.0, 0.0, 0.0], p: [1.0, 2.0, 3.0] });
        assert_eq!(Command::parse(&steer.to_json()).unwrap(), steer);
        assert!(Command::parse(r#"{"cmd":"explode"}"#).is_err());
    }

    #[test]
    fn scene_update_schema() {
        let u = SceneUpdate {
            state: NavState::Lost,
            alert: Alert::Clear,
            margin_mm: 10.0,
            t: 1.5,
            instruments: vec![],
            clips: vec![],
            meshes: None,
            preop_context_only: None,
        };
        let v: serde_json::Value = serde_json::from_str(&u.to_json()).unwrap();
        assert_eq!(v["state"], "LOST");
        assert_eq!(v["alert"], "CLEAR");
        assert_eq!(v["margin_mm"], 10.0);
        assert!(v["instruments"].as_array().unwrap().is_empty());
        assert!(v.get("meshes").is_none());
        assert_eq!(SceneUpdate::from_message(&u.to_message()).unwrap(), u);
    }
}
