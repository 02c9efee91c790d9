use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use matret_core::dataset::{build_real_views, RealConfig, RenderConfig};
use matret_core::encoder::{init_from_seed, save_checkpoint, EncoderConfig, EncoderParams};
use matret_core::index::{build_index, query_topk, save_index, SimilarityMode};
use matret_core::material::{sample_gallery, MaterialSpec};
use matret_core::renderer::{render_sphere_swatch, Mask, Raster, Shape};
use matret_service::{router, QueryResponse, ServeConfig, ServiceState};
use serde_json::Value;
use tower::ServiceExt;

const BOUNDARY: &str = "matret-test-boundary";

fn gallery() -> Vec<MaterialSpec> {
    sample_gallery(11, 12, "g")
}

// swatches need at least 32 pixels; coarse patches keep it fast
fn small() -> EncoderConfig {
    EncoderConfig { resolution: 32, patch_size: 8, embed_dim: 16, n_blocks: 1, n_heads: 2, mlp_ratio: 2, output_dim: 8, seed: 3 }
}

fn encoder() -> EncoderParams {
    init_from_seed(&small()).unwrap()
}

fn state(mode: SimilarityMode) -> Arc<ServiceState> {
    let e = encoder();
    let g = gallery();
    let index = build_index(&e, &g, mode).unwrap();
    Arc::new(ServiceState::new(e, index, &g).unwrap())
}

fn multipart(parts: &[(&str, &[u8])]) -> (String, Vec<u8>) {
    let mut body = Vec::new();
    for (name, bytes) in parts {
        body.extend_from_slice(format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"{name}\"").as_bytes());
        if *name != "k" {
            body.extend_from_slice(format!("; filename=\"{name}.bin\"\r\nContent-Type: application/octet-stream").as_bytes());
        }
        body.extend_from_slice(b"\r\n\r\n");
        body.extend_from_slice(bytes);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    (format!("multipart/form-data; boundary={BOUNDARY}"), body)
}

async fn send(state: &Arc<ServiceState>, req: Request<Body>) -> (StatusCode, Option<String>, Vec<u8>) {
    let resp = router(Arc::clone(state)).oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp.headers().get("content-type").map(|v| v.to_str().unwrap().to_string());
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, ctype, body)
}

async fn get(state: &Arc<ServiceState>, uri: &str) -> (StatusCode, Option<String>, Vec<u8>) {
    send(state, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post_query(state: &Arc<ServiceState>, parts: &[(&str, &[u8])]) -> (StatusCode, Vec<u8>) {
    let (ctype, body) = multipart(parts);
    let req = Request::post("/query").header("content-type", ctype).body(Body::from(body)).unwrap();
    let (status, _, body) = send(state, req).await;
    (status, body)
}

fn json(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

fn queries(n: usize) -> Vec<(Vec<u8>, Vec<u8>)> {
    let cfg = RealConfig {
        render: RenderConfig { seed: 5, resolution: 32, ..RenderConfig::default() },
        ..RealConfig::default()
    };
    let ds = build_real_views(&gallery(), &Shape::default_set(4), n, &cfg).unwrap();
    ds.images.iter().zip(&ds.masks).map(|(i, m)| (i.encode_ppm().unwrap(), m.encode_pgm().unwrap())).collect()
}

#[tokio::test]
async fn healthz_reports_gallery_size() {
    let s = state(SimilarityMode::ScaledDot);
    let (status, _, body) = get(&s, "/healthz").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json(&body), serde_json::json!({ "status": "ok", "gallery_size": 12 }));
}

#[tokio::test]
async fn http_matches_in_process_on_twenty_queries() {
    let s = state(SimilarityMode::ScaledDot);
    for (image, mask) in queries(20) {
        let (status, body) = post_query(&s, &[("image", &image), ("mask", &mask), ("k", b"12")]).await;
        assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
        let resp: QueryResponse = serde_json::from_slice(&body).unwrap();
        let local = query_topk(
            &s.index,
            &s.image_encoder,
            &Raster::decode_image(&image).unwrap(),
            &Mask::decode(&mask).unwrap(),
            12,
        )
        .unwrap();
        assert_eq!(resp.v, 1);
        assert_eq!(resp.results.len(), local.results.len());
        for (h, l) in resp.results.iter().zip(&local.results) {
            assert_eq!(h.material_id, l.material_id);
            assert_eq!(h.category, l.category);
            assert!((h.score - l.score).abs() <= 1e-9);
            assert_eq!(h.swatch_url, format!("/materials/{}/swatch.bmp", h.material_id));
        }
        assert!(resp.results.windows(2).all(|w| w[0].score >= w[1].score));
    }
}

#[tokio::test]
async fn swatch_self_query_ranks_first_with_shared_weights() {
    let s = state(SimilarityMode::Cosine);
    for m in gallery().iter().take(4) {
        let image = render_sphere_swatch(m, 32).unwrap().encode_ppm().unwrap();
        let (status, body) = post_query(&s, &[("image", &image), ("k", b"1")]).await;
        assert_eq!(status, StatusCode::OK);
        let resp: QueryResponse = serde_json::from_slice(&body).unwrap();
        assert_eq!(resp.results.len(), 1);
        assert_eq!(resp.results[0].material_id, m.id);
    }
}

#[tokio::test]
async fn repeated_request_gives_identical_body() {
    let s = state(SimilarityMode::ScaledDot);
    let (image, mask) = queries(1).remove(0);
    let parts: [(&str, &[u8]); 2] = [("image", &image), ("mask", &mask)];
    let a = post_query(&s, &parts).await;
    let b = post_query(&s, &parts).await;
    assert_eq!(a.0, StatusCode::OK);
    assert_eq!(a, b);
    assert_eq!(json(&a.1)["k"], 5);
}

#[tokio::test]
async fn validation_errors_are_400_with_error_json() {
    let s = state(SimilarityMode::ScaledDot);
    let (image, mask) = queries(1).remove(0);
    let big = Raster::new(64, 64).unwrap().encode_ppm().unwrap();
    let small_mask = Mask::full(8, 8).encode_pgm().unwrap();
    let cases: Vec<Vec<(&str, &[u8])>> = vec![
        vec![("image", &big)],
        vec![("image", &image), ("mask", &small_mask)],
        vec![("image", b"not an image")],
        vec![("image", &image), ("k", b"0")],
        vec![("image", &image), ("k", b"51")],
        vec![("image", &image), ("k", b"five")],
        vec![("mask", &mask)],
        vec![("image", &image), ("extra", b"x")],
    ];
    for parts in cases {
        let (status, body) = post_query(&s, &parts).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        let v = json(&body);
        assert!(v["error"].as_str().is_some_and(|e| !e.is_empty()), "{v}");
    }
    let (status, body) = post_query(&s, &[("image", &image), ("k", b"50")]).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json(&body)["results"].as_array().unwrap().len(), 12);
}

#[tokio::test]
async fn swatches_are_bmp() {
    let s = state(SimilarityMode::ScaledDot);
    let id = &gallery()[3].id;
    let (status, ctype, body) = get(&s, &format!("/materials/{id}/swatch.bmp")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("image/bmp"));
    assert_eq!(&body[..2], b"BM");
    let r = Raster::decode_image(&body).unwrap();
    assert_eq!((r.width(), r.height()), (64, 64));
    let (status, _, body) = get(&s, "/materials/nope/swatch.bmp").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(json(&body)["error"].is_string());
}

#[tokio::test]
async fn materials_pages_and_version() {
    let s = state(SimilarityMode::ScaledDot);
    let (status, _, body) = get(&s, "/materials?page=1&per_page=5").await;
    assert_eq!(status, StatusCode::OK);
    let v = json(&body);
    assert_eq!(v["v"], 1);
    assert_eq!(v["total"], 12);
    let ids: Vec<&str> = v["materials"].as_array().unwrap().iter().map(|m| m["id"].as_str().unwrap()).collect();
    let want: Vec<String> = s.index.entries[5..10].iter().map(|e| e.material_id.clone()).collect();
    assert_eq!(ids, want);
    let (status, _, _) = get(&s, "/materials?per_page=0").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (_, _, body) = get(&s, "/version").await;
    let v = json(&body);
    assert_eq!(v["v"], 1);
    assert_eq!(v["gallery_size"], 12);
    assert_eq!(v["mode"], "scaled_dot");
}

#[test]
fn inconsistent_artifacts_refuse_to_start() {
    let e = encoder();
    let g = gallery();
    let index = build_index(&e, &g, SimilarityMode::ScaledDot).unwrap();

    let mut wide = small();
    wide.output_dim = 4;
    assert!(ServiceState::new(init_from_seed(&wide).unwrap(), index.clone(), &g).is_err());
    assert!(ServiceState::new(e.clone(), index.clone(), &g[..6]).is_err());

    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ds = matret_core::dataset::build_synthetic(
        &g,
        &Shape::default_set(1),
        1,
        &RenderConfig { resolution: 32, ..RenderConfig::default() },
    )
    .unwrap();
    matret_core::dataset::save_manifest(&ds, &data).unwrap();
    save_checkpoint(&e, &dir.path().join("enc.ckpt")).unwrap();
    save_index(&index, &dir.path().join("idx.bin")).unwrap();
    let mut other = small();
    other.seed = 99;
    save_checkpoint(&init_from_seed(&other).unwrap(), &dir.path().join("other.ckpt")).unwrap();
    let mut config = ServeConfig {
        host: "127.0.0.1".into(),
        port: 0,
        checkpoint: dir.path().join("enc.ckpt"),
        index: dir.path().join("idx.bin"),
        data_dir: data,
        material_checkpoint: Some(dir.path().join("enc.ckpt")),
    };
    assert!(ServiceState::load(&config).is_ok());
    config.material_checkpoint = Some(dir.path().join("other.ckpt"));
    let err = ServiceState::load(&config).unwrap_err().to_string();
    assert!(err.contains("does not match"), "{err}");
}
