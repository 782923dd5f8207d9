use serde::{Deserialize, Serialize};

pub const DEFAULT_HYSTERESIS_MM: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Alert {
    Clear,
    NearMargin,
    InsideMargin,
}

impl Alert {
    pub fn as_str(self) -> &'static str {
        match self {
            Alert::Clear => "CLEAR",
            Alert::NearMargin => "NEAR_MARGIN",
            Alert::InsideMargin => "INSIDE_MARGIN",
        }
    }
}

/// Alert for a distance with no history: inside below `margin`, near in
/// the closed band `[margin, margin + hysteresis]`, clear above.
pub fn check_alert(d: f64, margin: f64, hysteresis: f64) -> Alert {
    if d < margin {
        Alert::InsideMargin
    } else if d <= margin + hysteresis {
        Alert::NearMargin
    } else {
        Alert::Clear
    }
}

/// Alert given the previous state. Escalation is immediate; leaving a
/// state requires the distance to clear that state's upper bound by
/// `hysteresis` (INSIDE: `d ≥ margin + h`; NEAR: `d ≥ margin + 2h`).
pub fn next_alert(prev: Alert, d: f64, margin: f64, hysteresis: f64) -> Alert {
    let raw = check_alert(d, margin, hysteresis);
    if raw >= prev {
        return raw;
    }
    match prev {
        Alert::InsideMargin if d >= margin + hysteresis => raw,
        Alert::NearMargin if d >= margin + 2.0 * hysteresis => raw,
        _ => prev,
    }
}
