//! Line-delimited JSON scenario files.
//!
//! One header record first, then any number of `polyline`, `light` and
//! `track` records, one per line. Floats are written in shortest
//! round-trip form so `load(save(s)) == s` bit for bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AgentKind, AgentMeta, LightState, MapPolyline, PolylineKind, Scenario, TrafficLight, Track};
use crate::codec::ActionToken;
use crate::error::{Error, Result};
use crate::kinematics::{AgentState, Vec2};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case", deny_unknown_fields)]
enum Record {
    Header {
        version: u32,
        id: String,
        dt: f64,
        history_len: usize,
        future_len: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ego: Option<u32>,
    },
    Polyline {
        kind: PolylineKind,
        points: Vec<[f64; 2]>,
    },
    Light {
        stop_point: [f64; 2],
        states: Vec<LightState>,
    },
    Track {
        id: u32,
        kind: AgentKind,
        length: f64,
        width: f64,
        states: Vec<[f64; 4]>,
        valid: Vec<bool>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tokens: Option<Vec<usize>>,
    },
}

fn records(s: &Scenario) -> Vec<Record> {
    let mut out = vec![Record::Header {
        version: FORMAT_VERSION,
        id: s.id.clone(),
        dt: s.dt,
        history_len: s.history_len,
        future_len: s.future_len,
        ego: s.ego,
    }];
    out.extend(s.polylines.iter().map(|p| Record::Polyline {
        kind: p.kind,
        points: p.points.iter().map(|v| [v.x, v.y]).collect(),
    }));
    out.extend(s.lights.iter().map(|l| Record::Light {
        stop_point: [l.stop_point.x, l.stop_point.y],
        states: l.states.clone(),
    }));
    out.extend(s.tracks.iter().map(|t| Record::Track {
        id: t.meta.id,
        kind: t.meta.kind,
        length: t.meta.length,
        width: t.meta.width,
        states: t.states.iter().map(|s| [s.x, s.y, s.theta, s.v]).collect(),
        valid: t.valid.clone(),
        tokens: t.tokens.as_ref().map(|ts| ts.iter().map(|t| t.flat()).collect()),
    }));
    out
}

/// Serializes a scenario to any writer.
pub fn write_scenario<W: Write>(s: &Scenario, mut w: W) -> std::io::Result<()> {
    for r in records(s) {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_scenario(s: &Scenario, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_scenario(s, &mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scenario(&text)
}

/// Parses scenario text, reporting the 1-based line of the first problem.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let mut scenario: Option<Scenario> = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        match (record, scenario.as_mut()) {
            (
                Record::Header { version, id, dt, history_len, future_len, ego },
                None,
            ) => {
                if version != FORMAT_VERSION {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("unsupported format version {version}"),
                    });
                }
                scenario = Some(Scenario {
                    id,
                    dt,
                    history_len,
                    future_len,
                    polylines: vec![],
                    tracks: vec![],
                    lights: vec![],
                    ego,
                });
            }
            (Record::Header { .. }, Some(_)) => {
                return Err(Error::Parse { line: line_no, msg: "duplicate header record".into() })
            }
            (_, None) => {
                return Err(Error::Parse { line: line_no, msg: "expected header record first".into() })
            }
            (Record::Polyline { kind, points }, Some(s)) => s.polylines.push(MapPolyline {
                kind,
                points: points.iter().map(|p| Vec2::new(p[0], p[1])).collect(),
            }),
            (Record::Light { stop_point, states }, Some(s)) => s.lights.push(TrafficLight {
                stop_point: Vec2::new(stop_point[0], stop_point[1]),
                states,
            }),
            (Record::Track { id, kind, length, width, states, valid, tokens }, Some(s)) => {
                let tokens = match tokens {
                    Some(ts) => Some(
                        ts.into_iter()
                            .map(ActionToken::from_flat)
                            .collect::<Result<Vec<_>>>()
                            .map_err(|e| Error::Parse { line: line_no, msg: format!("track {id}: {e}") })?,
                    ),
                    None => None,
                };
                s.tracks.push(Track {
                    meta: AgentMeta { id, kind, length, width },
                    states: states.iter().map(|v| AgentState::new(v[0], v[1], v[2], v[3])).collect(),
                    valid,
                    tokens,
                });
            }
        }
    }
    let scenario = scenario.ok_or(Error::Parse { line: 0, msg: "missing header record".into() })?;
    scenario.validate()?;
    Ok(scenario)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::synth::{generate_synthetic, GenConfig};

    fn sample() -> Scenario {
        let cfg = GenConfig { straight_follow: 1, intersection_turn: 1, ..GenConfig::empty() };
        generate_synthetic(&cfg, 3).unwrap().remove(1)
    }

    #[test]
    fn roundtrip_is_exact() {
        let s = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        save_scenario(&s, &path).unwrap();
        assert_eq!(load_scenario(&path).unwrap(), s);
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let mut buf = Vec::new();
        write_scenario(&sample(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut = &text[..text.len() - 40];
        let lines = cut.lines().count();
        match parse_scenario(cut) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, lines),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_track_length_names_track() {
        let mut s = sample();
        let id = s.tracks[0].id();
        s.tracks[0].states.pop();
        let mut buf = Vec::new();
        write_scenario(&s, &mut buf).unwrap();
        let err = parse_scenario(std::str::from_utf8(&buf).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));
        assert!(err.to_string().contains(&format!("track {id}")), "{err}");
    }

    #[test]
    fn header_must_come_first() {
        let text = "{\"record\":\"polyline\",\"kind\":\"lane_center\",\"points\":[[0,0],[1,0]]}\n";
        assert!(matches!(parse_scenario(text), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_scenario(""), Err(Error::Parse { .. })));
    }

    #[test]
    fn unknown_field_is_rejected() {
        let text = "{\"record\":\"header\",\"version\":1,\"id\":\"x\",\"dt\":0.5,\"history_len\":0,\"future_len\":1,\"bogus\":3}\n";
        assert!(matches!(parse_scenario(text), Err(Error::Parse { line: 1, .. })));
    }
}
