//! API gateway: maps `/v1` requests onto the control-plane services.
//!
//! [`Gateway::handle`] is framework independent so the same dispatch runs
//! behind the axum server ([`http`]), the in-process agent transport and
//! the C ABI. Every route in [`ROUTES`] declares its [`Access`] rule; the
//! rule is enforced before the handler runs and every response produces
//! one audit record.

pub mod audit;
pub mod http;
pub mod integrate;
pub mod multipart;

use std::path::{Component, Path};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::api::{EnrollRequest, ErrorEnvelope, HeartbeatRequest, ResultRequest};
use crate::context::{owning_lab, ControlMode, DeviceDescriptor, FederationState, NewEntity, NodeFilter, Role, UserRecord};
use crate::error::{Error, ErrorCode, Result};
use crate::ids::{secret_digest, Id};
use crate::repos::{ArtifactFilter, ArtifactKind, Descriptors, UploadRequest};
use crate::scheduler::render_listing;
use crate::sessions::SessionFilter;
use crate::ControlPlane;

use self::audit::AuditRecord;
pub use self::integrate::{ControlInterface, IntegrationRequest, IntegrationResult, NodeScript};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Get,
    Post,
    Put,
    Delete,
}

impl Method {
    pub fn parse(s: &str) -> Option<Method> {
        match s.to_ascii_uppercase().as_str() {
            "GET" | "HEAD" => Some(Method::Get),
            "POST" => Some(Method::Post),
            "PUT" => Some(Method::Put),
            "DELETE" => Some(Method::Delete),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Get => "GET",
            Method::Post => "POST",
            Method::Put => "PUT",
            Method::Delete => "DELETE",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ApiRequest {
    pub method: Option<Method>,
    /// Path without query string.
    pub path: String,
    pub query: Vec<(String, String)>,
    /// Header names are compared case-insensitively.
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl ApiRequest {
    pub fn new(method: Method, path_and_query: &str) -> Self {
        let (path, query) = match path_and_query.split_once('?') {
            Some((p, q)) => (p, q),
            None => (path_and_query, ""),
        };
        ApiRequest {
            method: Some(method),
            path: path.to_string(),
            query: form_urlencoded::parse(query.as_bytes()).into_owned().collect(),
            headers: Vec::new(),
            body: Vec::new(),
        }
    }

    pub fn header(mut self, name: &str, value: &str) -> Self {
        self.headers.push((name.to_string(), value.to_string()));
        self
    }

    pub fn bearer(self, token: &str) -> Self {
        self.header("authorization", &format!("Bearer {token}"))
    }

    pub fn json(mut self, body: &impl Serialize) -> Self {
        self.body = serde_json::to_vec(body).expect("request bodies serialize");
        self.header("content-type", "application/json")
    }

    pub fn get_header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn query_param(&self, name: &str) -> Option<&str> {
        self.query.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }

    fn bearer_token(&self) -> Option<&str> {
        let value = self.get_header("authorization")?;
        let (scheme, token) = value.split_once(' ')?;
        scheme.eq_ignore_ascii_case("bearer").then(|| token.trim()).filter(|t| !t.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiResponse {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl ApiResponse {
    pub fn json<T: Serialize>(status: u16, value: &T) -> Self {
        ApiResponse {
            status,
            headers: vec![("content-type".into(), "application/json".into())],
            body: serde_json::to_vec(value).expect("response bodies serialize"),
        }
    }

    pub fn bytes(status: u16, content_type: &str, body: Vec<u8>) -> Self {
        ApiResponse {
            status,
            headers: vec![("content-type".into(), content_type.into())],
            body,
        }
    }

    pub fn error(err: &Error) -> Self {
        ApiResponse::json(
            err.code.http_status(),
            &ErrorEnvelope {
                code: err.code.as_str().to_string(),
                message: err.message.clone(),
                details: err.details.clone(),
            },
        )
    }

    pub fn with_header(mut self, name: &str, value: &str) -> Self {
        self.headers.push((name.to_string(), value.to_string()));
        self
    }

    pub fn get_header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    /// Decodes a JSON body, or the error envelope on failure.
    pub fn decode<T: DeserializeOwned>(&self) -> std::result::Result<T, ErrorEnvelope> {
        if self.is_success() {
            serde_json::from_slice(&self.body).map_err(|e| ErrorEnvelope {
                code: ErrorCode::BadFormat.as_str().into(),
                message: e.to_string(),
                details: Vec::new(),
            })
        } else {
            Err(self.error_envelope())
        }
    }

    pub fn error_envelope(&self) -> ErrorEnvelope {
        serde_json::from_slice(&self.body).unwrap_or_else(|_| ErrorEnvelope {
            code: ErrorCode::Internal.as_str().into(),
            message: format!("HTTP {}", self.status),
            details: Vec::new(),
        })
    }
}

/// Who may call a route.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Public,
    /// Bearer token issued to an enrolled agent.
    Agent,
    /// Any logged-in user.
    Authenticated,
    /// Logged-in user holding one of these roles.
    Roles(&'static [Role]),
}

impl Access {
    pub fn admits(self, role: Role) -> bool {
        match self {
            Access::Public | Access::Authenticated => true,
            Access::Agent => false,
            Access::Roles(roles) => roles.contains(&role),
        }
    }
}

const OWNERS: &[Role] = &[Role::Owner, Role::Admin];
const ADMINS: &[Role] = &[Role::Admin];

type Handler = fn(&Gateway, &Call<'_>) -> Result<ApiResponse>;

pub struct Route {
    pub method: Method,
    /// Segments; `{name}` captures one segment and `{*name}` the remainder.
    pub pattern: &'static str,
    pub access: Access,
    pub action: &'static str,
    handler: Handler,
}

impl std::fmt::Debug for Route {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Route")
            .field("method", &self.method)
            .field("pattern", &self.pattern)
            .field("access", &self.access)
            .finish()
    }
}

macro_rules! route {
    ($m:ident $p:literal, $a:expr, $act:literal => $h:path) => {
        Route {
            method: Method::$m,
            pattern: $p,
            access: $a,
            action: $act,
            handler: $h,
        }
    };
}

pub static ROUTES: &[Route] = &[
    route!(Get "/v1/health", Access::Public, "health" => h_health),
    route!(Post "/v1/auth/login", Access::Public, "auth.login" => h_login),
    route!(Post "/v1/auth/logout", Access::Authenticated, "auth.logout" => h_logout),
    route!(Get "/v1/auth/me", Access::Authenticated, "auth.me" => h_me),
    route!(Post "/v1/users", Access::Roles(ADMINS), "users.create" => h_create_user),
    route!(Post "/v1/testbeds/integrate", Access::Roles(OWNERS), "testbeds.integrate" => h_integrate),
    route!(Get "/v1/labs", Access::Authenticated, "labs.list" => h_labs),
    route!(Post "/v1/labs", Access::Roles(OWNERS), "labs.create" => h_create_lab),
    route!(Get "/v1/testbeds", Access::Authenticated, "testbeds.list" => h_testbeds),
    route!(Post "/v1/testbeds", Access::Roles(OWNERS), "testbeds.create" => h_create_testbed),
    route!(Get "/v1/nodes", Access::Authenticated, "nodes.query" => h_nodes),
    route!(Post "/v1/nodes", Access::Roles(OWNERS), "nodes.create" => h_create_node),
    route!(Post "/v1/nodes/{id}/activation", Access::Roles(OWNERS), "nodes.activation" => h_node_activation),
    route!(Get "/v1/nodes/{id}/script", Access::Roles(OWNERS), "nodes.script" => h_node_script),
    route!(Get "/v1/nodes/{id}/schedule", Access::Authenticated, "nodes.schedule" => h_node_schedule),
    route!(Post "/v1/nodes/{id}/commands", Access::Roles(OWNERS), "commands.dispatch" => h_dispatch),
    route!(Get "/v1/nodes/{id}/commands", Access::Roles(OWNERS), "commands.list" => h_node_commands),
    route!(Get "/v1/commands/{id}", Access::Roles(OWNERS), "commands.get" => h_command),
    route!(Get "/v1/entities/{id}", Access::Authenticated, "context.get" => h_entity),
    route!(Delete "/v1/entities/{id}", Access::Roles(OWNERS), "context.delete" => h_delete_entity),
    route!(Post "/v1/bindings", Access::Roles(OWNERS), "bindings.create" => h_bind),
    route!(Get "/v1/fleet", Access::Roles(OWNERS), "fleet.dashboard" => h_fleet),
    route!(Post "/v1/reservations", Access::Authenticated, "reservations.create" => h_create_reservation),
    route!(Get "/v1/reservations", Access::Authenticated, "reservations.list" => h_reservations),
    route!(Get "/v1/reservations/{id}", Access::Authenticated, "reservations.get" => h_reservation),
    route!(Delete "/v1/reservations/{id}", Access::Authenticated, "reservations.cancel" => h_cancel_reservation),
    route!(Get "/v1/access-check", Access::Authenticated, "reservations.access_check" => h_access_check),
    route!(Post "/v1/sessions", Access::Authenticated, "sessions.connect" => h_connect),
    route!(Get "/v1/sessions", Access::Authenticated, "sessions.list" => h_sessions),
    route!(Get "/v1/sessions/{id}", Access::Authenticated, "sessions.get" => h_session),
    route!(Delete "/v1/sessions/{id}", Access::Authenticated, "sessions.disconnect" => h_disconnect),
    route!(Get "/v1/latency", Access::Authenticated, "sessions.latency" => h_latency),
    route!(Post "/v1/artifacts", Access::Authenticated, "artifacts.upload" => h_upload),
    route!(Get "/v1/artifacts", Access::Authenticated, "artifacts.list" => h_artifacts),
    route!(Get "/v1/artifacts/{id}", Access::Authenticated, "artifacts.get" => h_artifact),
    route!(Get "/v1/artifacts/{id}/content", Access::Authenticated, "artifacts.download" => h_download),
    route!(Post "/v1/agent/enroll", Access::Public, "agent.enroll" => h_enroll),
    route!(Post "/v1/agent/heartbeat", Access::Agent, "agent.heartbeat" => h_heartbeat),
    route!(Post "/v1/agent/result", Access::Agent, "agent.result" => h_result),
    route!(Get "/v1/agent/artifacts/{id}/content", Access::Agent, "agent.artifact" => h_agent_artifact),
    route!(Get "/dist/fedplane-agent", Access::Public, "dist.agent" => h_dist_agent),
    route!(Get "/ui", Access::Public, "ui" => h_ui),
    route!(Get "/ui/{*path}", Access::Public, "ui" => h_ui),
];

fn match_route(pattern: &str, path: &str) -> Option<Vec<(&'static str, String)>> {
    let mut params = Vec::new();
    let mut pat = pattern.trim_matches('/').split('/');
    let mut segs = path.trim_end_matches('/').trim_start_matches('/').split('/');
    loop {
        match (pat.next(), segs.next()) {
            (None, None) => return Some(params),
            (Some(p), Some(s)) if p.starts_with("{*") => {
                let rest: Vec<&str> = std::iter::once(s).chain(segs).collect();
                params.push((leak_name(p), rest.join("/")));
                return Some(params);
            }
            (Some(p), Some(s)) if p.starts_with('{') => {
                if s.is_empty() {
                    return None;
                }
                params.push((leak_name(p), s.to_string()));
            }
            (Some(p), Some(s)) if p == s => {}
            _ => return None,
        }
    }
}

fn leak_name(p: &str) -> &'static str {
    // Only the fixed names used in ROUTES occur here.
    match p.trim_matches(|c| c == '{' || c == '}' || c == '*') {
        "id" => "id",
        "path" => "path",
        _ => "param",
    }
}

/// The authenticated party behind a request.
#[derive(Debug, Clone)]
pub enum Caller {
    Anonymous,
    User(UserRecord),
    Agent(Id),
}

impl Caller {
    fn actor(&self) -> String {
        match self {
            Caller::Anonymous => "anonymous".into(),
            Caller::User(u) => format!("user:{}", u.user_id),
            Caller::Agent(n) => format!("agent:{n}"),
        }
    }
}

pub struct Call<'r> {
    pub req: &'r ApiRequest,
    params: Vec<(&'static str, String)>,
    pub caller: Caller,
}

impl Call<'_> {
    fn param(&self, name: &str) -> &str {
        self.params
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| v.as_str())
            .unwrap_or_default()
    }

    fn id_param(&self) -> Result<Id> {
        let raw = self.param("id");
        Id::parse(raw).ok_or_else(|| Error::not_found(raw))
    }

    fn user(&self) -> &UserRecord {
        match &self.caller {
            Caller::User(u) => u,
            _ => unreachable!("user routes run only for authenticated users"),
        }
    }

    fn token(&self) -> &str {
        self.req.bearer_token().unwrap_or_default()
    }

    fn body<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_slice(&self.req.body)
            .map_err(|e| Error::new(ErrorCode::BadRequest, format!("invalid JSON body: {e}")))
    }

    fn query(&self, name: &str) -> Option<&str> {
        self.req.query_param(name).filter(|v| !v.is_empty())
    }

    fn query_id(&self, name: &str) -> Result<Option<Id>> {
        match self.query(name) {
            None => Ok(None),
            Some(raw) => Id::parse(raw)
                .map(Some)
                .ok_or_else(|| Error::new(ErrorCode::Validation, format!("{name} is not a valid ID")).with_details(vec![name.into()])),
        }
    }

    fn query_time(&self, name: &str) -> Result<Option<DateTime<Utc>>> {
        match self.query(name) {
            None => Ok(None),
            Some(raw) => DateTime::parse_from_rfc3339(raw)
                .map(|t| Some(t.with_timezone(&Utc)))
                .map_err(|_| Error::new(ErrorCode::Validation, format!("{name} must be an RFC 3339 timestamp")).with_details(vec![name.into()])),
        }
    }
}

/// Cheap to clone; wraps a shared [`ControlPlane`].
#[derive(Clone)]
pub struct Gateway {
    plane: Arc<ControlPlane>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway").field("plane", &self.plane).finish()
    }
}

impl Gateway {
    pub fn new(plane: Arc<ControlPlane>) -> Self {
        Gateway { plane }
    }

    pub fn plane(&self) -> &Arc<ControlPlane> {
        &self.plane
    }

    pub fn routes() -> &'static [Route] {
        ROUTES
    }

    pub fn handle(&self, req: &ApiRequest) -> ApiResponse {
        let mut action = "unrouted";
        let mut caller = Caller::Anonymous;
        let result = self.dispatch(req, &mut action, &mut caller);
        let (response, outcome, detail) = match result {
            Ok(resp) => (resp, "OK".to_string(), None),
            Err(err) => {
                let detail = err.audit_detail.map(str::to_string);
                if err.code.http_status() >= 500 {
                    tracing::error!(code = %err.code, message = %err.message, action, "request failed");
                }
                (ApiResponse::error(&err), err.code.as_str().to_string(), detail)
            }
        };
        self.plane.audit.record(AuditRecord {
            at: self.plane.clock.now(),
            actor: caller.actor(),
            method: req.method.map_or("?", Method::as_str).to_string(),
            path: req.path.clone(),
            action: action.to_string(),
            status: response.status,
            outcome,
            detail,
        });
        response
    }

    fn dispatch(&self, req: &ApiRequest, action: &mut &'static str, caller: &mut Caller) -> Result<ApiResponse> {
        let method = req
            .method
            .ok_or_else(|| Error::new(ErrorCode::BadRequest, "unsupported method"))?;
        let mut path_known = false;
        let mut found = None;
        for route in ROUTES {
            if let Some(params) = match_route(route.pattern, &req.path) {
                path_known = true;
                if route.method == method {
                    found = Some((route, params));
                    break;
                }
            }
        }
        let Some((route, params)) = found else {
            return Err(if path_known {
                Error::new(ErrorCode::BadRequest, format!("{} not allowed on {}", method.as_str(), req.path))
            } else {
                Error::not_found(&req.path)
            });
        };
        *action = route.action;
        *caller = self.authorize(req, route.access)?;
        let call = Call {
            req,
            params,
            caller: caller.clone(),
        };
        (route.handler)(self, &call)
    }

    fn authorize(&self, req: &ApiRequest, access: Access) -> Result<Caller> {
        let missing = || Error::new(ErrorCode::Unauthorized, "missing bearer token");
        match access {
            Access::Public => Ok(Caller::Anonymous),
            Access::Agent => {
                let token = req.bearer_token().ok_or_else(missing)?;
                let digest = secret_digest(token);
                self.plane
                    .store
                    .read(|s| s.agent_by_token_digest(&digest).map(|a| a.node_id.clone()))
                    .map(Caller::Agent)
                    .ok_or_else(|| Error::new(ErrorCode::Unauthorized, "unknown or superseded agent token"))
            }
            Access::Authenticated | Access::Roles(_) => {
                let token = req.bearer_token().ok_or_else(missing)?;
                let user = self.plane.auth().authenticate(token)?;
                if !access.admits(user.role) {
                    return Err(Error::new(ErrorCode::Forbidden, "role not permitted for this operation"));
                }
                Ok(Caller::User(user))
            }
        }
    }

    /// Admins, or the owner of the lab containing `id`.
    fn require_owner(&self, user: &UserRecord, id: &Id) -> Result<()> {
        if user.role == Role::Admin {
            return Ok(());
        }
        let owner = self.plane.store.read(|s| owning_lab(s, id).map(|l| l.owner_user_id.clone()));
        match owner {
            Some(o) if o == user.user_id => Ok(()),
            Some(_) => Err(Error::new(ErrorCode::Forbidden, "not the owner of this lab")),
            None => Err(Error::not_found(id)),
        }
    }

    fn node_of_command(&self, command_id: &Id) -> Result<Id> {
        Ok(self.plane.federation().get_command(command_id)?.node_id)
    }
}

fn ok<T: Serialize>(value: &T) -> Result<ApiResponse> {
    Ok(ApiResponse::json(200, value))
}

fn created<T: Serialize>(value: &T) -> Result<ApiResponse> {
    Ok(ApiResponse::json(201, value))
}

/// Public projection of a user; the credential hash never leaves the store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserView {
    pub user_id: Id,
    pub username: String,
    pub role: Role,
    pub created_at: DateTime<Utc>,
}

impl From<&UserRecord> for UserView {
    fn from(u: &UserRecord) -> Self {
        UserView {
            user_id: u.user_id.clone(),
            username: u.username.clone(),
            role: u.role,
            created_at: u.created_at,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoginBody {
    pub username: String,
    pub credential: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateUserBody {
    pub username: String,
    pub credential: String,
    pub role: Role,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateLabBody {
    pub name: String,
    /// Admins may create a lab on behalf of an owner.
    #[serde(default)]
    pub owner_user_id: Option<Id>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateTestbedBody {
    pub lab_id: Id,
    pub public_name: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateNodeBody {
    pub testbed_id: Id,
    pub public_identifier: String,
    #[serde(default)]
    pub device_descriptors: Vec<DeviceDescriptor>,
    #[serde(default = "distributed")]
    pub control_mode: ControlMode,
}

fn distributed() -> ControlMode {
    ControlMode::Distributed
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DispatchBody {
    pub argv: Vec<String>,
    #[serde(default = "default_timeout")]
    pub timeout_s: u64,
}

fn default_timeout() -> u64 {
    60
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BindBody {
    pub target_id: Id,
    pub image_ref: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReservationBody {
    pub node_ids: Vec<Id>,
    pub start_at: DateTime<Utc>,
    pub end_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConnectBody {
    pub node_id: Id,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
    pub revision: u64,
}

fn h_health(g: &Gateway, _c: &Call<'_>) -> Result<ApiResponse> {
    ok(&Health {
        status: "ok".into(),
        version: crate::VERSION.into(),
        revision: g.plane.revision(),
    })
}

fn h_login(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let body: LoginBody = c.body()?;
    ok(&g.plane.auth().login(&body.username, &body.credential)?)
}

fn h_logout(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    g.plane.auth().logout(c.token())?;
    Ok(ApiResponse::bytes(204, "text/plain", Vec::new()))
}

fn h_me(_g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    ok(&UserView::from(c.user()))
}

fn h_create_user(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let body: CreateUserBody = c.body()?;
    let user = g.plane.auth().create_user(&body.username, &body.credential, body.role)?;
    created(&UserView::from(&user))
}

fn h_integrate(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let body: IntegrationRequest = c.body()?;
    created(&g.plane.integrate_testbed(c.user(), &body)?)
}

fn h_labs(g: &Gateway, _c: &Call<'_>) -> Result<ApiResponse> {
    ok(&g.plane.context().labs())
}

fn h_create_lab(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let body: CreateLabBody = c.body()?;
    let user = c.user();
    let owner = match body.owner_user_id {
        Some(o) if o != user.user_id && user.role != Role::Admin => {
            return Err(Error::new(ErrorCode::Forbidden, "only admins may create labs for other users"))
        }
        Some(o) => o,
        None => user.user_id.clone(),
    };
    created(&g.plane.context().put_entity(NewEntity::Lab {
        name: body.name,
        owner_user_id: owner,
    })?)
}

fn h_testbeds(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let lab = c.query_id("lab_id")?;
    ok(&g.plane.context().testbeds(lab.as_ref()))
}

fn h_create_testbed(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let body: CreateTestbedBody = c.body()?;
    g.require_owner(c.user(), &body.lab_id)?;
    created(&g.plane.context().put_entity(NewEntity::Testbed {
        lab_id: body.lab_id,
        public_name: body.public_name,
        description: body.description,
    })?)
}

fn h_nodes(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let state = match c.query("state") {
        None => None,
        Some(s) => Some(FederationState::parse(s).ok_or_else(|| {
            Error::new(ErrorCode::Validation, format!("unknown state {s:?}")).with_details(vec!["state".into()])
        })?),
    };
    let filter = NodeFilter {
        state,
        testbed_id: c.query_id("testbed_id")?,
        testbed_name: c.query("testbed_name").map(str::to_string),
        lab_id: c.query_id("lab_id")?,
        device_kind: c.query("device_kind").map(str::to_string),
        device_model: c.query("device_model").map(str::to_string),
        include_deleted: false,
    };
    ok(&g.plane.context().query(&filter))
}

fn h_create_node(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let body: CreateNodeBody = c.body()?;
    g.require_owner(c.user(), &body.testbed_id)?;
    created(&g.plane.context().put_entity(NewEntity::Node {
        testbed_id: body.testbed_id,
        public_identifier: body.public_identifier,
        device_descriptors: body.device_descriptors,
        control_mode: body.control_mode,
    })?)
}

fn h_node_activation(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let node_id = c.id_param()?;
    created(&g.plane.integrate_node(c.user(), &node_id)?)
}

fn h_node_script(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let node_id = c.id_param()?;
    g.require_owner(c.user(), &node_id)?;
    let script = g.plane.federation().generate_script(&node_id)?;
    Ok(ApiResponse::bytes(200, "text/x-shellscript", script.script_text.into_bytes())
        .with_header("x-checksum-sha256", &script.checksum))
}

fn h_node_schedule(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let node_id = c.id_param()?;
    let window = match (c.query_time("from")?, c.query_time("to")?) {
        (Some(a), Some(b)) => Some((a, b)),
        (None, None) => None,
        _ => {
            return Err(Error::new(ErrorCode::Validation, "from and to must be given together")
                .with_details(vec!["from".into(), "to".into()]))
        }
    };
    let listing = g.plane.scheduler().get_schedule(&node_id, window)?;
    if c.query("format") == Some("ics") {
        return Ok(ApiResponse::bytes(200, "text/calendar", render_listing(&node_id, &listing).into_bytes()));
    }
    ok(&listing)
}

fn h_dispatch(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let node_id = c.id_param()?;
    g.require_owner(c.user(), &node_id)?;
    let body: DispatchBody = c.body()?;
    created(&g.plane.federation().dispatch_command(&node_id, body.argv, body.timeout_s)?)
}

fn h_node_commands(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let node_id = c.id_param()?;
    g.require_owner(c.user(), &node_id)?;
    ok(&g.plane.federation().commands_for(&node_id))
}

fn h_command(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let command_id = c.id_param()?;
    g.require_owner(c.user(), &g.node_of_command(&command_id)?)?;
    ok(&g.plane.federation().get_command(&command_id)?)
}

fn h_entity(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    ok(&g.plane.context().get_context(&c.id_param()?)?)
}

fn h_delete_entity(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let id = c.id_param()?;
    g.require_owner(c.user(), &id)?;
    g.plane.context().delete_entity(&id)?;
    Ok(ApiResponse::bytes(204, "text/plain", Vec::new()))
}

fn h_bind(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let body: BindBody = c.body()?;
    created(&g.plane.sessions().bind_image(c.user(), &body.target_id, &body.image_ref, &body.description)?)
}

fn h_fleet(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let user = c.user();
    let mut fleet = g.plane.federation().fleet_dashboard();
    if user.role != Role::Admin {
        let own: Vec<Id> = g.plane.store.read(|s| {
            s.live_labs()
                .filter(|l| l.owner_user_id == user.user_id)
                .map(|l| l.lab_id.clone())
                .collect()
        });
        fleet.retain(|e| own.contains(&e.lab_id));
    }
    ok(&fleet)
}

fn h_create_reservation(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let body: ReservationBody = c.body()?;
    created(&g.plane.scheduler().create_reservation(&c.user().user_id, &body.node_ids, body.start_at, body.end_at)?)
}

fn h_reservations(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let user = c.user();
    let scope = (user.role != Role::Admin).then_some(&user.user_id);
    ok(&g.plane.scheduler().reservations_for_user(scope))
}

fn visible_to(user: &UserRecord, owner: &Id) -> Result<()> {
    if user.role == Role::Admin || &user.user_id == owner {
        Ok(())
    } else {
        Err(Error::new(ErrorCode::Forbidden, "belongs to another user"))
    }
}

fn h_reservation(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let r = g.plane.scheduler().get_reservation(&c.id_param()?)?;
    visible_to(c.user(), &r.user_id)?;
    ok(&r)
}

fn h_cancel_reservation(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    ok(&g.plane.scheduler().cancel_reservation(&c.id_param()?, c.user())?)
}

fn h_access_check(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let user = c.user();
    let node_id = c
        .query_id("node_id")?
        .ok_or_else(|| Error::new(ErrorCode::Validation, "node_id is required").with_details(vec!["node_id".into()]))?;
    let subject = match c.query_id("user_id")? {
        Some(other) if other != user.user_id && user.role != Role::Admin => {
            return Err(Error::new(ErrorCode::Forbidden, "only admins may check access for other users"))
        }
        Some(other) => other,
        None => user.user_id.clone(),
    };
    let at = c.query_time("at")?.unwrap_or_else(|| g.plane.clock.now());
    ok(&g.plane.scheduler().access_check(&subject, &node_id, at))
}

fn h_connect(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let body: ConnectBody = c.body()?;
    created(&g.plane.sessions().connect(c.user(), &body.node_id)?)
}

fn session_filter(c: &Call<'_>) -> Result<SessionFilter> {
    let user = c.user();
    Ok(SessionFilter {
        node_id: c.query_id("node_id")?,
        testbed_id: c.query_id("testbed_id")?,
        user_id: (user.role == Role::Experimenter).then(|| user.user_id.clone()),
    })
}

fn h_sessions(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    ok(&g.plane.sessions().list(&session_filter(c)?))
}

fn h_session(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let s = g.plane.sessions().get(&c.id_param()?)?;
    visible_to(c.user(), &s.user_id)?;
    ok(&s)
}

fn h_disconnect(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    ok(&g.plane.sessions().disconnect(&c.id_param()?, c.user())?)
}

fn h_latency(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let filter = session_filter(c)?;
    let sessions = g.plane.sessions();
    if c.query("format") == Some("csv") {
        return Ok(ApiResponse::bytes(200, "text/csv", sessions.latency_csv(&filter).into_bytes()));
    }
    ok(&sessions.latency_stats(&filter))
}

fn upload_from_parts(c: &Call<'_>) -> Result<UploadRequest> {
    let content_type = c.req.get_header("content-type").unwrap_or_default();
    let mut fields: Vec<(String, String)> = c.req.query.clone();
    let mut file: Option<(String, Vec<u8>)> = None;
    if let Some(boundary) = multipart::boundary(content_type) {
        let parts = multipart::parse(&c.req.body, &boundary)
            .map_err(|e| Error::new(ErrorCode::BadRequest, format!("multipart: {e}")))?;
        for part in parts {
            match part.filename {
                Some(name) if part.name == "file" => file = Some((name, part.data)),
                _ => fields.push((part.name, String::from_utf8_lossy(&part.data).into_owned())),
            }
        }
    } else {
        let name = fields.iter().find(|(k, _)| k == "filename").map(|(_, v)| v.clone());
        file = Some((name.unwrap_or_default(), c.req.body.clone()));
    }
    let field = |name: &str| {
        fields
            .iter()
            .rev()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.trim().to_string())
            .filter(|v| !v.is_empty())
    };
    let mut missing = Vec::new();
    let kind = field("kind").and_then(|k| ArtifactKind::parse(&k));
    if kind.is_none() {
        missing.push("kind".to_string());
    }
    let namespace = field("namespace");
    if namespace.is_none() {
        missing.push("namespace".to_string());
    }
    let (filename, bytes) = file.unwrap_or_default();
    let filename = field("filename").unwrap_or(filename);
    if filename.trim().is_empty() {
        missing.push("file".to_string());
    }
    if !missing.is_empty() {
        return Err(Error::new(ErrorCode::Validation, "upload is incomplete").with_details(missing));
    }
    let opt_id = |name: &str| -> Result<Option<Id>> {
        match field(name) {
            None => Ok(None),
            Some(v) => Id::parse(&v)
                .map(Some)
                .ok_or_else(|| Error::new(ErrorCode::Validation, format!("{name} is not a valid ID")).with_details(vec![name.into()])),
        }
    };
    Ok(UploadRequest {
        kind: kind.expect("checked above"),
        namespace: namespace.expect("checked above"),
        filename,
        bytes,
        descriptors: Descriptors {
            node_id: opt_id("node_id")?,
            testbed_id: opt_id("testbed_id")?,
            experiment_context: field("experiment_context").unwrap_or_default(),
        },
        expected_checksum: field("checksum"),
    })
}

fn h_upload(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let upload = upload_from_parts(c)?;
    created(&g.plane.repos().upload(&c.user().user_id, upload)?)
}

fn h_artifacts(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let kind = match c.query("kind") {
        None => None,
        Some(k) => Some(ArtifactKind::parse(k).ok_or_else(|| {
            Error::new(ErrorCode::Validation, format!("unknown kind {k:?}")).with_details(vec!["kind".into()])
        })?),
    };
    let filter = ArtifactFilter {
        namespace: c.query("namespace").map(str::to_string),
        kind,
        node_id: c.query_id("node_id")?,
        testbed_id: c.query_id("testbed_id")?,
    };
    ok(&g.plane.repos().list(&filter))
}

fn h_artifact(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    ok(&g.plane.repos().entry(&c.id_param()?)?)
}

fn h_download(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let (entry, bytes) = g.plane.repos().fetch(&c.id_param()?)?;
    let disposition = format!("attachment; filename=\"{}\"", entry.filename.replace(['"', '\\', '\r', '\n'], "_"));
    Ok(ApiResponse::bytes(200, "application/octet-stream", bytes)
        .with_header("x-checksum-sha256", &entry.checksum)
        .with_header("content-disposition", &disposition))
}

fn h_enroll(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let body: EnrollRequest = c
        .body()
        .map_err(|_| Error::new(ErrorCode::Rejected, "activation rejected").with_audit_detail("MALFORMED"))?;
    ok(&g.plane.federation().enroll(&body)?)
}

fn h_heartbeat(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let body: HeartbeatRequest = if c.req.body.is_empty() { HeartbeatRequest::default() } else { c.body()? };
    ok(&g.plane.federation().heartbeat(c.token(), &body)?)
}

fn h_result(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let body: ResultRequest = c.body()?;
    ok(&g.plane.federation().report_result(c.token(), &body)?)
}

/// Agents may fetch only artifacts filed under or describing their node.
fn h_agent_artifact(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let Caller::Agent(node_id) = &c.caller else {
        unreachable!("agent routes run only for agents")
    };
    let id = c.id_param()?;
    let entry = g.plane.repos().entry(&id)?;
    if !entry.references(node_id) {
        return Err(Error::new(ErrorCode::Forbidden, "artifact is not associated with this node"));
    }
    let (entry, bytes) = g.plane.repos().fetch(&id)?;
    Ok(ApiResponse::bytes(200, "application/octet-stream", bytes).with_header("x-checksum-sha256", &entry.checksum))
}

fn h_dist_agent(g: &Gateway, _c: &Call<'_>) -> Result<ApiResponse> {
    let path = g
        .plane
        .config
        .agent_binary
        .as_ref()
        .ok_or_else(|| Error::not_found("agent binary"))?;
    let bytes = std::fs::read(path).map_err(|_| Error::not_found("agent binary"))?;
    let checksum = crate::repos::sha256_hex(&bytes);
    Ok(ApiResponse::bytes(200, "application/octet-stream", bytes).with_header("x-checksum-sha256", &checksum))
}

fn content_type_for(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or_default() {
        "html" | "htm" => "text/html; charset=utf-8",
        "css" => "text/css",
        "js" | "mjs" => "text/javascript",
        "json" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "ico" => "image/x-icon",
        "woff2" => "font/woff2",
        "txt" => "text/plain; charset=utf-8",
        _ => "application/octet-stream",
    }
}

fn h_ui(g: &Gateway, c: &Call<'_>) -> Result<ApiResponse> {
    let root = g.plane.config.ui_dir.as_ref().ok_or_else(|| Error::not_found("/ui"))?;
    let rel = Path::new(c.param("path"));
    if rel.components().any(|comp| !matches!(comp, Component::Normal(_))) {
        return Err(Error::not_found(&c.req.path));
    }
    let mut path = root.join(rel);
    if path.is_dir() {
        path = path.join("index.html");
    }
    let bytes = std::fs::read(&path).map_err(|_| Error::not_found(&c.req.path))?;
    Ok(ApiResponse::bytes(200, content_type_for(&path), bytes))
}

#[cfg(test)]
mod tests;
