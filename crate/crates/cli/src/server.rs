//! Read-only HTTP API over a directory of finished runs.
//!
//! All routing goes through [`handle`], a pure function of the index and the
//! request target; the axum layer only adapts it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::extract::State;
use axum::http::{header, Method, StatusCode, Uri};
use axum::response::Response;
use axum::Router;
use pathwayforge_core::pathway::compare_membership;
use pathwayforge_core::store::{import_graph_json, to_json_bytes, NodeAssets, RunManifest};
use pathwayforge_core::{Epsilon, NeuronId, PathwayGraph};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Run { path: String, message: String },
    #[error("{first} and {second} both hold pair {original}->{target}")]
    Duplicate {
        original: usize,
        target: usize,
        first: String,
        second: String,
    },
}

/// One servable run: its graph as exported and the parsed view of it.
pub struct PairEntry {
    pub root: PathBuf,
    pub name: String,
    pub graph_bytes: Vec<u8>,
    pub graph: PathwayGraph,
    pub assets: BTreeMap<NeuronId, NodeAssets>,
    pub manifest: RunManifest,
}

/// Immutable index of every run directory under a data root, built once.
pub struct DataIndex {
    pub pairs: BTreeMap<(usize, usize), PairEntry>,
    ui: Option<PathBuf>,
}

impl DataIndex {
    /// Indexes each subdirectory holding both `manifest.json` and `graph.json`.
    pub fn load(root: &Path) -> Result<Self, IndexError> {
        let io = |p: &Path| {
            let path = p.display().to_string();
            move |source| IndexError::Io { path, source }
        };
        let mut dirs: Vec<PathBuf> = fs::read_dir(root)
            .map_err(io(root))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("manifest.json").is_file() && p.join("graph.json").is_file())
            .collect();
        dirs.sort();
        let mut pairs: BTreeMap<(usize, usize), PairEntry> = BTreeMap::new();
        for dir in dirs {
            let graph_path = dir.join("graph.json");
            let bytes = fs::read(&graph_path).map_err(io(&graph_path))?;
            let (graph, assets, manifest) = import_graph_json(&bytes).map_err(|e| IndexError::Run {
                path: graph_path.display().to_string(),
                message: e.to_string(),
            })?;
            let key = (manifest.original, manifest.target);
            let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
            if let Some(prev) = pairs.get(&key) {
                return Err(IndexError::Duplicate {
                    original: key.0,
                    target: key.1,
                    first: prev.name.clone(),
                    second: name,
                });
            }
            pairs.insert(
                key,
                PairEntry {
                    root: dir,
                    name,
                    graph_bytes: bytes,
                    graph,
                    assets,
                    manifest,
                },
            );
        }
        Ok(Self { pairs, ui: None })
    }

    /// Also serve static files from `dir` for paths outside `/api` and `/assets`.
    pub fn with_ui(mut self, dir: Option<PathBuf>) -> Self {
        self.ui = dir;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiResponse {
    pub status: u16,
    pub content_type: &'static str,
    pub body: Vec<u8>,
}

const JSON: &str = "application/json";

fn json_response<T: Serialize + ?Sized>(status: u16, value: &T) -> ApiResponse {
    ApiResponse {
        status,
        content_type: JSON,
        body: to_json_bytes(value).expect("response values are finite"),
    }
}

fn error(status: u16, message: impl Into<String>) -> ApiResponse {
    json_response(status, &json!({ "error": message.into() }))
}

fn bad_request(message: impl Into<String>) -> ApiResponse {
    error(400, message)
}

fn not_found(message: impl Into<String>) -> ApiResponse {
    error(404, message)
}

struct Query(BTreeMap<String, String>);

impl Query {
    fn parse(raw: Option<&str>) -> Result<Self, ApiResponse> {
        let pairs: Vec<(String, String)> =
            serde_urlencoded::from_str(raw.unwrap_or("")).map_err(|e| bad_request(format!("malformed query: {e}")))?;
        let mut map = BTreeMap::new();
        for (k, v) in pairs {
            if map.insert(k.clone(), v).is_some() {
                return Err(bad_request(format!("parameter {k} given twice")));
            }
        }
        Ok(Self(map))
    }

    fn get(&self, key: &str) -> Result<&str, ApiResponse> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| bad_request(format!("missing parameter {key}")))
    }

    fn usize(&self, key: &str) -> Result<usize, ApiResponse> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| bad_request(format!("parameter {key} must be a non-negative integer, got {v:?}")))
    }

    fn epsilon(&self, key: &str) -> Result<Epsilon, ApiResponse> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| bad_request(format!("parameter {key} must be an attack strength, got {v:?}")))
    }

    fn pair<'a>(&self, index: &'a DataIndex) -> Result<&'a PairEntry, ApiResponse> {
        let (o, t) = (self.usize("original")?, self.usize("target")?);
        index
            .pairs
            .get(&(o, t))
            .ok_or_else(|| not_found(format!("no run for class pair {o}->{t}")))
    }
}

fn pairs(index: &DataIndex) -> ApiResponse {
    let list: Vec<Value> = index
        .pairs
        .values()
        .map(|p| {
            json!({
                "original": p.manifest.original,
                "target": p.manifest.target,
                "run": p.name,
                "manifest": p.manifest,
            })
        })
        .collect();
    json_response(200, &json!({ "pairs": list }))
}

fn asset_url(pair: &PairEntry, path: &str) -> String {
    format!("/assets/{}/{}", pair.name, path.strip_prefix("assets/").unwrap_or(path))
}

fn neuron(index: &DataIndex, q: &Query) -> Result<ApiResponse, ApiResponse> {
    let pair = q.pair(index)?;
    let layer_raw = q.get("layer")?;
    let layer = match layer_raw.parse::<usize>() {
        Ok(l) => l,
        Err(_) => NeuronId::layer_index(layer_raw)
            .ok_or_else(|| bad_request(format!("unknown layer {layer_raw:?}")))?,
    };
    let channel = q.usize("channel")?;
    let width = pair
        .graph
        .layer_widths
        .get(layer)
        .ok_or_else(|| not_found(format!("layer {layer_raw} does not exist")))?;
    if channel >= *width {
        return Err(not_found(format!("channel {channel} is outside layer {layer_raw} (width {width})")));
    }
    let id = NeuronId::new(layer, channel);
    let node = pair
        .graph
        .node(id)
        .ok_or_else(|| not_found(format!("{id} is not in the pathway graph of this pair")))?;
    let assets = pair.assets.get(&id).cloned().unwrap_or_default();
    let patches: Vec<Value> = assets
        .patches
        .iter()
        .map(|p| {
            let mut v = serde_json::to_value(p).expect("patch serializes");
            v["url"] = json!(asset_url(pair, &p.path));
            v
        })
        .collect();
    let body = json!({
        "neuron": id,
        "context": node.context,
        "importance": node.importance,
        "excitation": node.excitation.iter().map(|(e, v)| (e.to_string(), *v)).collect::<BTreeMap<_, _>>(),
        "member_of": node.member_of,
        "patches": patches,
        "feature_vis": assets.feature_vis,
        "feature_vis_url": assets.feature_vis.as_deref().map(|p| asset_url(pair, p)),
    });
    Ok(json_response(200, &body))
}

fn compare(index: &DataIndex, q: &Query) -> Result<ApiResponse, ApiResponse> {
    let pair = q.pair(index)?;
    let (weak, strong) = (q.epsilon("weak")?, q.epsilon("strong")?);
    if weak >= strong {
        return Err(bad_request(format!("weak strength {weak} must be below strong strength {strong}")));
    }
    for e in [weak, strong] {
        if !pair.graph.epsilons.contains(&e) {
            return Err(not_found(format!("strength {e} was not part of this run")));
        }
    }
    let membership = compare_membership(&pair.graph, weak, strong).map_err(|e| bad_request(e.to_string()))?;
    let nodes: Vec<Value> = membership
        .iter()
        .map(|(id, m)| json!({ "layer": id.layer_name(), "channel": id.channel, "in_weak": m.in_weak, "in_strong": m.in_strong }))
        .collect();
    Ok(json_response(
        200,
        &json!({ "weak": weak, "strong": strong, "nodes": nodes }),
    ))
}

/// Path segments safe to join under a served directory.
fn safe_segments(rest: &str) -> Option<Vec<&str>> {
    let segs: Vec<&str> = rest.split('/').collect();
    let ok = segs.iter().all(|s| {
        !s.is_empty() && *s != "." && *s != ".." && s.bytes().all(|b| b.is_ascii_alphanumeric() || b"._-".contains(&b))
    });
    ok.then_some(segs)
}

fn file_response(path: &Path) -> ApiResponse {
    let content_type = match path.extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        Some("html") => "text/html; charset=utf-8",
        Some("js") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => JSON,
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    };
    match fs::read(path) {
        Ok(body) => ApiResponse {
            status: 200,
            content_type,
            body,
        },
        Err(_) => not_found("no such file"),
    }
}

fn asset(index: &DataIndex, rest: &str) -> ApiResponse {
    let Some(segs) = safe_segments(rest) else {
        return bad_request("malformed asset path");
    };
    let Some((run, file)) = segs.split_first().filter(|(_, f)| !f.is_empty()) else {
        return not_found("no such asset");
    };
    let Some(pair) = index.pairs.values().find(|p| p.name == *run) else {
        return not_found(format!("no run named {run}"));
    };
    if !file.last().is_some_and(|f| f.ends_with(".png")) {
        return not_found("only PNG assets are served");
    }
    file_response(&file.iter().fold(pair.root.join("assets"), |p, s| p.join(s)))
}

fn ui(index: &DataIndex, path: &str) -> ApiResponse {
    let Some(dir) = &index.ui else {
        return not_found(format!("no route {path}"));
    };
    let rel = path.trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    match safe_segments(rel) {
        Some(segs) => file_response(&segs.iter().fold(dir.clone(), |p, s| p.join(s))),
        None => bad_request("malformed path"),
    }
}

/// Answers a GET for `path` with the raw query string `query`.
pub fn handle(index: &DataIndex, path: &str, query: Option<&str>) -> ApiResponse {
    let q = match Query::parse(query) {
        Ok(q) => q,
        Err(r) => return r,
    };
    let result = match path {
        "/api/pairs" => Ok(pairs(index)),
        "/api/graph" => q.pair(index).map(|p| ApiResponse {
            status: 200,
            content_type: JSON,
            body: p.graph_bytes.clone(),
        }),
        "/api/neuron" => neuron(index, &q),
        "/api/compare" => compare(index, &q),
        p if p.starts_with("/assets/") => Ok(asset(index, &p["/assets/".len()..])),
        p if p.starts_with("/api/") => Err(not_found(format!("no route {p}"))),
        p => Ok(ui(index, p)),
    };
    result.unwrap_or_else(|e| e)
}

async fn dispatch(State(index): State<Arc<DataIndex>>, method: Method, uri: Uri) -> Response {
    let r = if method == Method::GET || method == Method::HEAD {
        handle(&index, uri.path(), uri.query())
    } else {
        error(405, "the API is read-only")
    };
    Response::builder()
        .status(StatusCode::from_u16(r.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR))
        .header(header::CONTENT_TYPE, r.content_type)
        .body(Body::from(r.body))
        .expect("static headers are valid")
}

pub fn router(index: Arc<DataIndex>) -> Router {
    Router::new().fallback(dispatch).with_state(index)
}
