mod common;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use common::{cli_infer, fixture, tiny_config};
use gramsr_core::guidance::{GuidanceMode, GuidanceScales};
use gramsr_core::trainer::{load_checkpoint, RunConfig};
use gramsr_service::{router, AppState, InferRequest, InferResponse};

async fn spawn_server() -> SocketAddr {
    let ckpt = load_checkpoint(&fixture().stage3).unwrap();
    let state = Arc::new(AppState::new(ckpt).unwrap());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(state)).await.unwrap() });
    addr
}

fn request(scales: [f64; 3], mode: GuidanceMode) -> InferRequest {
    let png = std::fs::read(&fixture().lq).unwrap();
    InferRequest::new(&png, GuidanceScales::new(scales[0], scales[1], scales[2]), mode)
}

async fn post_infer(addr: SocketAddr, req: &InferRequest) -> InferResponse {
    let resp = reqwest::Client::new()
        .post(format!("http://{addr}/api/infer"))
        .json(req)
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 200);
    resp.json().await.unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn http_infer_matches_cli_bytes() {
    let addr = spawn_server().await;
    for (scales, mode, flag) in [
        ([1.0, 1.0, 1.0], GuidanceMode::Residual, "residual"),
        ([0.0, 0.0, 0.0], GuidanceMode::Residual, "residual"),
        ([0.0, 0.0, 0.0], GuidanceMode::Literal, "literal"),
        ([0.5, 1.0, 0.75], GuidanceMode::Literal, "literal"),
    ] {
        let resp = post_infer(addr, &request(scales, mode)).await;
        assert_eq!((resp.width, resp.height), (64, 64));
        assert_eq!(resp.scales.as_array(), scales);
        assert_eq!(resp.mode, mode);
        let cli = tokio::task::spawn_blocking(move || cli_infer(scales, flag))
            .await
            .unwrap();
        assert_eq!(resp.png_bytes().unwrap(), cli, "{scales:?} {flag}");
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn concurrent_identical_requests_agree() {
    let addr = spawn_server().await;
    let req = request([1.0, 0.5, 0.25], GuidanceMode::Residual);
    let (a, b) = tokio::join!(post_infer(addr, &req), post_infer(addr, &req));
    assert_eq!(a.image, b.image);
}

#[tokio::test(flavor = "multi_thread")]
async fn health_document_is_complete_and_stable() {
    let addr = spawn_server().await;
    let client = reqwest::Client::new();
    let get = || async {
        client
            .get(format!("http://{addr}/api/health"))
            .send()
            .await
            .unwrap()
            .json::<serde_json::Value>()
            .await
            .unwrap()
    };
    let before = get().await;
    for key in ["stage", "codec_stride", "encoder_seeds", "uptime_seconds"] {
        assert!(before.get(key).is_some(), "missing {key}");
    }
    let cfg = RunConfig::load(tiny_config()).unwrap();
    assert_eq!(before["stage"], 3);
    assert_eq!(before["codec_stride"], cfg.codec_stride as u64);
    assert_eq!(
        before["encoder_seeds"]["conditioning"],
        cfg.encoders.conditioning.seed
    );
    assert_eq!(before["encoder_seeds"]["gram"], cfg.encoders.gram.seed);

    post_infer(addr, &request([1.0, 1.0, 1.0], GuidanceMode::Residual)).await;
    let after = get().await;
    for key in ["stage", "codec_stride", "encoder_seeds"] {
        assert_eq!(before[key], after[key], "{key}");
    }
    assert!(after["uptime_seconds"].as_f64() >= before["uptime_seconds"].as_f64());
}

#[tokio::test(flavor = "multi_thread")]
async fn model_endpoint_returns_the_run_config() {
    let addr = spawn_server().await;
    let text = reqwest::get(format!("http://{addr}/api/model"))
        .await
        .unwrap()
        .text()
        .await
        .unwrap();
    let served = RunConfig::from_json(&text).unwrap();
    assert_eq!(served, RunConfig::load(tiny_config()).unwrap());
}

#[tokio::test(flavor = "multi_thread")]
async fn malformed_requests_are_client_errors() {
    let addr = spawn_server().await;
    let client = reqwest::Client::new();
    let url = format!("http://{addr}/api/infer");
    let mut bad_b64 = request([1.0, 1.0, 1.0], GuidanceMode::Residual);
    bad_b64.image = "***not base64***".into();
    let mut not_png = bad_b64.clone();
    not_png.image = "aGVsbG8=".into();
    let mut odd_size = bad_b64.clone();
    let tiny = gramsr_core::image::ImageTensor::filled(5, 5, 3, 0.5).unwrap();
    odd_size.image = InferRequest::new(
        &gramsr_core::image::encode_png(&tiny).unwrap(),
        GuidanceScales::default(),
        GuidanceMode::Residual,
    )
    .image;
    for req in [bad_b64, not_png, odd_size] {
        let resp = client.post(&url).json(&req).send().await.unwrap();
        assert_eq!(resp.status(), 400, "{}", &req.image[..req.image.len().min(16)]);
        let body: serde_json::Value = resp.json().await.unwrap();
        assert!(body["error"].as_str().is_some_and(|s| !s.is_empty()));
    }
    let resp = client.post(&url).body("{").send().await.unwrap();
    assert_eq!(resp.status(), 400);
}

#[tokio::test(flavor = "multi_thread")]
async fn serve_subcommand_answers_health() {
    let f = fixture();
    // ask the OS for a free port, then hand it to the binary
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let mut child = std::process::Command::new(env!("CARGO_BIN_EXE_gramsr"))
        .arg("serve")
        .arg("--ckpt")
        .arg(&f.stage3)
        .arg("--port")
        .arg(port.to_string())
        .env("GRAMSR_CONFIG", tiny_config())
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let url = format!("http://127.0.0.1:{port}/api/health");
    let mut health = None;
    for _ in 0..100 {
        if let Ok(resp) = reqwest::get(&url).await {
            health = Some(resp.json::<serde_json::Value>().await.unwrap());
            break;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    child.kill().unwrap();
    child.wait().unwrap();
    assert_eq!(health.expect("server came up")["stage"], 3);
}
