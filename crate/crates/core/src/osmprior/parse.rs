use super::{OsmData, OsmError, OsmWay, WayKind};
use crate::geodesy::GeoPoint;
use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use std::collections::BTreeMap;

fn attr(e: &BytesStart, name: &str) -> Result<Option<String>, OsmError> {
    let a = e
        .try_get_attribute(name)
        .map_err(|err| OsmError::MalformedXml(err.to_string()))?;
    a.map(|a| {
        a.unescape_value()
            .map(|v| v.into_owned())
            .map_err(|err| OsmError::MalformedXml(err.to_string()))
    })
    .transpose()
}

fn required<T: std::str::FromStr>(e: &BytesStart, name: &str, pos: u64) -> Result<T, OsmError> {
    let tag = String::from_utf8_lossy(e.name().as_ref()).into_owned();
    let raw = attr(e, name)?
        .ok_or_else(|| OsmError::MalformedXml(format!("<{tag}> without {name} at byte {pos}")))?;
    raw.trim()
        .parse()
        .map_err(|_| OsmError::MalformedXml(format!("<{tag}> has bad {name}={raw:?} at byte {pos}")))
}

struct PendingWay {
    id: i64,
    node_ids: Vec<i64>,
    tags: BTreeMap<String, String>,
}

/// Reads `node`, `way`, `nd` and `tag` elements of an OSM XML document.
/// Ways tagged `building` become building rings, ways tagged `highway`
/// become road polylines; the building tag wins when both are present.
pub fn parse_osm_xml(document: &str) -> Result<OsmData, OsmError> {
    let mut reader = Reader::from_str(document);
    reader.config_mut().trim_text(true);
    let mut data = OsmData::default();
    let mut pending: Vec<PendingWay> = Vec::new();
    let mut current: Option<PendingWay> = None;
    let mut depth = 0usize;

    loop {
        let pos = reader.buffer_position();
        let event = reader
            .read_event()
            .map_err(|e| OsmError::MalformedXml(format!("{e} at byte {}", reader.error_position())))?;
        let (e, is_empty) = match &event {
            Event::Start(e) => {
                depth += 1;
                (e, false)
            }
            Event::Empty(e) => (e, true),
            Event::End(e) => {
                depth = depth.saturating_sub(1);
                if e.name().as_ref() == b"way" {
                    if let Some(w) = current.take() {
                        pending.push(w);
                    }
                }
                continue;
            }
            Event::Eof => break,
            _ => continue,
        };
        match e.name().as_ref() {
            b"node" => {
                let id: i64 = required(e, "id", pos)?;
                let lat: f64 = required(e, "lat", pos)?;
                let lon: f64 = required(e, "lon", pos)?;
                let p = GeoPoint::new(lat, lon)
                    .map_err(|err| OsmError::MalformedXml(format!("node {id}: {err}")))?;
                data.nodes.insert(id, p);
            }
            b"way" => {
                let w = PendingWay {
                    id: required(e, "id", pos)?,
                    node_ids: Vec::new(),
                    tags: BTreeMap::new(),
                };
                if is_empty {
                    pending.push(w);
                } else {
                    current = Some(w);
                }
            }
            b"nd" => {
                if let Some(w) = current.as_mut() {
                    w.node_ids.push(required(e, "ref", pos)?);
                }
            }
            b"tag" => {
                if let Some(w) = current.as_mut() {
                    let k: String = required(e, "k", pos)?;
                    let v = attr(e, "v")?.unwrap_or_default();
                    w.tags.insert(k, v);
                }
            }
            _ => {}
        }
    }
    if depth != 0 || current.is_some() {
        return Err(OsmError::MalformedXml("document ends inside an open element".into()));
    }

    for w in pending {
        let kind = if w.tags.contains_key("building") {
            WayKind::Building
        } else if w.tags.contains_key("highway") {
            WayKind::Road
        } else {
            continue;
        };
        if let Some(&missing) = w.node_ids.iter().find(|id| !data.nodes.contains_key(id)) {
            return Err(OsmError::DanglingNodeRef { way: w.id, node: missing });
        }
        if w.node_ids.len() < 2 {
            return Err(OsmError::DegenerateWay(w.id));
        }
        if kind == WayKind::Building && (w.node_ids.len() < 4 || w.node_ids.first() != w.node_ids.last()) {
            return Err(OsmError::OpenBuildingRing(w.id));
        }
        data.ways.insert(
            w.id,
            OsmWay {
                kind,
                node_ids: w.node_ids,
                tags: w.tags,
            },
        );
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesy::haversine_distance;

    const ROAD: &str = r#"<?xml version="1.0" encoding="UTF-8"?>
<osm version="0.6">
  <node id="1" lat="53.3400" lon="-6.2600"/>
  <node id="2" lat="53.3401" lon="-6.2598">
    <tag k="highway" v="traffic_signals"/>
  </node>
  <way id="10">
    <nd ref="1"/>
    <nd ref="2"/>
    <tag k="highway" v="residential"/>
    <tag k="name" v="Dame &amp; Street"/>
  </way>
  <way id="11">
    <nd ref="1"/>
    <nd ref="2"/>
    <tag k="waterway" v="canal"/>
  </way>
</osm>"#;

    #[test]
    fn one_road_polyline() {
        let d = parse_osm_xml(ROAD).unwrap();
        assert_eq!(d.nodes.len(), 2);
        assert_eq!(d.ways.len(), 1);
        let w = &d.ways[&10];
        assert_eq!(w.kind, WayKind::Road);
        assert_eq!(w.tags["name"], "Dame & Street");
        let expected = haversine_distance(GeoPoint::new(53.34, -6.26).unwrap(), GeoPoint::new(53.3401, -6.2598).unwrap());
        assert!((d.way_length(w) - expected).abs() < 1e-9);
    }

    #[test]
    fn dangling_reference() {
        let doc = r#"<osm><node id="1" lat="0" lon="0"/><way id="5"><nd ref="1"/><nd ref="9"/><tag k="highway" v="primary"/></way></osm>"#;
        assert_eq!(parse_osm_xml(doc), Err(OsmError::DanglingNodeRef { way: 5, node: 9 }));
    }

    #[test]
    fn empty_documents() {
        assert!(parse_osm_xml("").unwrap().is_empty());
        assert!(parse_osm_xml(r#"<osm version="0.6"></osm>"#).unwrap().is_empty());
        assert!(parse_osm_xml(r#"<osm><node id="3" lat="1" lon="2"/></osm>"#).unwrap().is_empty());
    }

    #[test]
    fn building_ring_must_close() {
        let open = r#"<osm>
            <node id="1" lat="0" lon="0"/><node id="2" lat="0" lon="0.0001"/><node id="3" lat="0.0001" lon="0.0001"/>
            <way id="7"><nd ref="1"/><nd ref="2"/><nd ref="3"/><tag k="building" v="yes"/></way></osm>"#;
        assert_eq!(parse_osm_xml(open), Err(OsmError::OpenBuildingRing(7)));
        let closed = open.replace(r#"<nd ref="3"/>"#, r#"<nd ref="3"/><nd ref="1"/>"#);
        let d = parse_osm_xml(&closed).unwrap();
        assert_eq!(d.ways[&7].kind, WayKind::Building);
    }

    #[test]
    fn malformed_inputs() {
        for doc in [
            r#"<osm><node id="1" lat="0" lon="0"></osm>"#,
            r#"<osm><node id="x" lat="0" lon="0"/></osm>"#,
            r#"<osm><node id="1" lat="95" lon="0"/></osm>"#,
            r#"<osm><way id="1">"#,
            r#"<osm><node id="1" lon="0"/></osm>"#,
        ] {
            assert!(matches!(parse_osm_xml(doc), Err(OsmError::MalformedXml(_))), "{doc}");
        }
    }
}
