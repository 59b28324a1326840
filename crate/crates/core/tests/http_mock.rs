//! Gateway and hidden-state client against the in-process mock server.

use ssbc_audit_core::gateway::{ChatMessage, ChatRequest, Gateway, GatewayConfig, GatewayError};
use ssbc_audit_core::mock::{MockServer, MOCK_HIDDEN_DIM, MOCK_LAYERS};
use ssbc_audit_core::probe::{HiddenStateClient, LayerSelection, ProbeError};

fn fast() -> GatewayConfig {
    GatewayConfig {
        max_retries: 3,
        backoff_base_ms: 1,
        backoff_cap_ms: 4,
        ..GatewayConfig::default()
    }
}

fn request(url: &str, text: &str) -> ChatRequest {
    ChatRequest {
        endpoint: url.to_string(),
        model: "mock-8b".into(),
        messages: vec![ChatMessage::user(text)],
        temperature: 0.0,
        max_tokens: 64,
        seed: Some(1),
    }
}

#[test]
fn rate_limited_then_ok_is_retried_and_cached() {
    let server = MockServer::start().unwrap();
    let cache = tempfile::tempdir().unwrap();
    let gw = Gateway::http(cache.path(), fast());
    server.script_failures([429]);
    let first = gw.chat_complete(&request(&server.url(), "I feel a bit stressed")).unwrap();
    assert!(!first.cached);
    assert_eq!(server.requests(), 2);
    assert_eq!(gw.network_calls(), 2);

    let again = gw.chat_complete(&request(&server.url(), "I feel a bit stressed")).unwrap();
    assert!(again.cached);
    assert_eq!(again.content, first.content);
    assert_eq!(server.requests(), 2);

    let offline = Gateway::http(cache.path(), GatewayConfig { offline: true, ..fast() });
    assert_eq!(offline.chat_complete(&request(&server.url(), "I feel a bit stressed")).unwrap().content, first.content);
    assert!(matches!(
        offline.chat_complete(&request(&server.url(), "something new")),
        Err(GatewayError::CacheMiss(_))
    ));
    assert_eq!(offline.network_calls(), 0);
}

#[test]
fn server_errors_exhaust_retries() {
    let server = MockServer::start().unwrap();
    let cache = tempfile::tempdir().unwrap();
    let gw = Gateway::http(cache.path(), fast());
    server.script_failures([503, 503, 503, 503]);
    let err = gw.chat_complete(&request(&server.url(), "hello there")).unwrap_err();
    assert!(matches!(err, GatewayError::Transport { attempts: 4, .. }), "{err}");
    assert_eq!(server.requests(), 4);
}

#[test]
fn client_errors_are_not_retried() {
    let server = MockServer::start().unwrap();
    let cache = tempfile::tempdir().unwrap();
    let gw = Gateway::http(cache.path(), fast());
    server.script_failures([400]);
    let err = gw.chat_complete(&request(&server.url(), "hello")).unwrap_err();
    assert!(matches!(err, GatewayError::Request { status: 400, .. }), "{err}");
    assert_eq!(server.requests(), 1);
}

#[test]
fn hidden_states_roundtrip_through_the_client() {
    let server = MockServer::start().unwrap();
    let cache = tempfile::tempdir().unwrap();
    let gw = Gateway::http(cache.path(), fast());
    let base = format!("http://127.0.0.1:{}", server.port());
    let client = HiddenStateClient::new(&base, "mock-8b");
    let prefix = [ChatMessage::user("I feel hopeless"), ChatMessage::assistant("I'm here."), ChatMessage::user("Thanks")];

    let all = client.extract(&gw, &prefix, LayerSelection::all()).unwrap();
    assert_eq!(all.hidden_dim, MOCK_HIDDEN_DIM);
    let map = all.into_map();
    assert_eq!(map.len(), usize::from(MOCK_LAYERS));
    assert!(map.values().all(|v| v.len() == MOCK_HIDDEN_DIM));

    let some = client.extract(&gw, &prefix, LayerSelection::Indices(vec![2, 5])).unwrap().into_map();
    assert_eq!(some.keys().copied().collect::<Vec<_>>(), vec![2, 5]);
    assert_eq!(some[&5], map[&5]);

    let before = server.requests();
    client.extract(&gw, &prefix, LayerSelection::all()).unwrap();
    assert_eq!(server.requests(), before, "second extraction served from cache");

    let err = client.extract(&gw, &prefix, LayerSelection::Indices(vec![MOCK_LAYERS + 3]));
    assert!(err.is_err());
    assert!(matches!(client.extract(&gw, &[], LayerSelection::all()), Err(ProbeError::EmptyPrefix)));
}
