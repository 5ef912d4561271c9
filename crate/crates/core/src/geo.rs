//! GeoJSON polygons keyed by region id.

use std::collections::BTreeMap;

use geojson::{Feature, FeatureCollection, GeoJson, Geometry, Value};
use serde_json::{Map, Value as JsonValue};

use crate::error::{Error, Result};

pub type Ring = Vec<[f64; 2]>;

#[derive(Debug, Clone, PartialEq)]
pub struct PolygonRings {
    pub exterior: Ring,
    pub holes: Vec<Ring>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionGeometry {
    pub region_id: String,
    pub polygons: Vec<PolygonRings>,
}

impl RegionGeometry {
    pub fn vertices(&self) -> impl Iterator<Item = &[f64; 2]> {
        self.polygons
            .iter()
            .flat_map(|p| std::iter::once(&p.exterior).chain(&p.holes))
            .flatten()
    }

    /// An axis-aligned rectangle as a single closed ring.
    pub fn rectangle(region_id: impl Into<String>, x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        RegionGeometry {
            region_id: region_id.into(),
            polygons: vec![PolygonRings {
                exterior: vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]],
                holes: Vec::new(),
            }],
        }
    }
}

fn property_as_id(feature: &Feature, id_property: &str) -> Result<String> {
    match feature.property(id_property) {
        Some(JsonValue::String(s)) => Ok(s.clone()),
        Some(JsonValue::Number(n)) => Ok(n.to_string()),
        Some(other) => Err(Error::InvalidData(format!(
            "id property `{id_property}` has unsupported value {other}"
        ))),
        None => Err(Error::InvalidData(format!(
            "feature without id property `{id_property}`"
        ))),
    }
}

fn to_ring(region: &str, positions: &[Vec<f64>]) -> Result<Ring> {
    let ring: Ring = positions
        .iter()
        .map(|p| match p[..] {
            [x, y, ..] => Ok([x, y]),
            _ => Err(Error::InvalidData(format!("region {region}: short coordinate"))),
        })
        .collect::<Result<_>>()?;
    if ring.len() < 4 || ring.first() != ring.last() {
        return Err(Error::InvalidData(format!(
            "region {region}: rings must be closed with at least 4 vertices"
        )));
    }
    Ok(ring)
}

fn to_polygon(region: &str, rings: &[Vec<Vec<f64>>]) -> Result<PolygonRings> {
    let mut iter = rings.iter();
    let exterior = iter
        .next()
        .ok_or_else(|| Error::InvalidData(format!("region {region}: polygon without rings")))?;
    Ok(PolygonRings {
        exterior: to_ring(region, exterior)?,
        holes: iter.map(|r| to_ring(region, r)).collect::<Result<_>>()?,
    })
}

fn parse_collection(text: &str) -> Result<FeatureCollection> {
    match text.parse::<GeoJson>() {
        Ok(GeoJson::FeatureCollection(fc)) => Ok(fc),
        Ok(_) => Err(Error::InvalidData("expected a GeoJSON FeatureCollection".into())),
        Err(e) => Err(Error::InvalidData(format!("invalid GeoJSON: {e}"))),
    }
}

/// Reads Polygon and MultiPolygon features; other geometry types are rejected.
pub fn read_geometries(text: &str, id_property: &str) -> Result<Vec<RegionGeometry>> {
    let fc = parse_collection(text)?;
    fc.features
        .iter()
        .map(|f| {
            let region_id = property_as_id(f, id_property)?;
            let geometry = f
                .geometry
                .as_ref()
                .ok_or_else(|| Error::InvalidData(format!("region {region_id}: missing geometry")))?;
            let polygons = match &geometry.value {
                Value::Polygon(rings) => vec![to_polygon(&region_id, rings)?],
                Value::MultiPolygon(polys) => polys
                    .iter()
                    .map(|p| to_polygon(&region_id, p))
                    .collect::<Result<_>>()?,
                other => {
                    return Err(Error::InvalidData(format!(
                        "region {region_id}: unsupported geometry {}",
                        other.type_name()
                    )))
                }
            };
            Ok(RegionGeometry { region_id, polygons })
        })
        .collect()
}

pub fn write_geometries(geoms: &[RegionGeometry], id_property: &str) -> Result<String> {
    let features = geoms
        .iter()
        .map(|g| {
            let polys: Vec<Vec<Vec<Vec<f64>>>> = g
                .polygons
                .iter()
                .map(|p| {
                    std::iter::once(&p.exterior)
                        .chain(&p.holes)
                        .map(|r| r.iter().map(|v| v.to_vec()).collect())
                        .collect()
                })
                .collect();
            let value = if polys.len() == 1 {
                Value::Polygon(polys.into_iter().next().expect("one polygon"))
            } else {
                Value::MultiPolygon(polys)
            };
            let mut props = Map::new();
            props.insert(id_property.to_string(), JsonValue::String(g.region_id.clone()));
            Feature {
                bbox: None,
                geometry: Some(Geometry::new(value)),
                id: None,
                properties: Some(props),
                foreign_members: None,
            }
        })
        .collect();
    let fc = FeatureCollection {
        bbox: None,
        features,
        foreign_members: None,
    };
    Ok(serde_json::to_string(&GeoJson::FeatureCollection(fc))?)
}

/// Copies `text`, adding `props[id]` to each feature's properties.
///
/// Features without an entry are passed through unchanged.
pub fn join_properties(
    text: &str,
    id_property: &str,
    props: &BTreeMap<String, Map<String, JsonValue>>,
) -> Result<String> {
    let mut fc = parse_collection(text)?;
    for f in &mut fc.features {
        let id = property_as_id(f, id_property)?;
        if let Some(extra) = props.get(&id) {
            let target = f.properties.get_or_insert_with(Map::new);
            for (k, v) in extra {
                target.insert(k.clone(), v.clone());
            }
        }
    }
    Ok(serde_json::to_string(&GeoJson::FeatureCollection(fc))?)
}
