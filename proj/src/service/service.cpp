#include "service.hpp"

#include <httplib.h>

#include <atomic>
#include <cstdio>
#include <iostream>
#include <random>

#include "base64.hpp"
#include "errors.hpp"
#include "image_io.hpp"

namespace clcae {

namespace {

HttpReply json_reply(int status, const Json& j) { return {status, j.dump()}; }

HttpReply error_reply(int status, const std::string& message) { return json_reply(status, {{"error", message}}); }

std::string png_base64(const ImageTensor& image) { return base64_encode(encode_png(image)); }

std::string error_id() {
  static std::atomic<unsigned> counter{0};
  char buf[32];
  std::snprintf(buf, sizeof buf, "E%08x", counter.fetch_add(1) + 1);
  return buf;
}

HttpReply internal_error(const std::exception& e) {
  const auto id = error_id();
  std::cerr << "internal error " << id << ": " << e.what() << '\n';
  return json_reply(500, {{"error", "internal error"}, {"error_id", id}});
}

// Parses a JSON object body; returns nullopt and fills `reply` on failure.
std::optional<Json> parse_body(const std::string& body, HttpReply& reply) {
  try {
    auto j = Json::parse(body);
    if (!j.is_object()) {
      reply = error_reply(400, "request body must be a JSON object");
      return std::nullopt;
    }
    return j;
  } catch (const Json::exception&) {
    reply = error_reply(400, "request body is not valid JSON");
    return std::nullopt;
  }
}

}  // namespace

SessionStore::SessionStore(std::size_t capacity) : capacity_(capacity) {
  if (capacity_ == 0) throw ConfigError("session capacity must be positive");
}

std::string SessionStore::new_id() {
  static thread_local std::mt19937_64 rng{std::random_device{}()};
  char buf[33];
  std::snprintf(buf, sizeof buf, "%016llx%016llx", static_cast<unsigned long long>(rng()),
                static_cast<unsigned long long>(rng()));
  return buf;
}

std::shared_ptr<Session> SessionStore::create(ImageTensor source, InversionBundle bundle) {
  auto s = std::make_shared<Session>();
  s->source = std::move(source);
  s->bundle = std::move(bundle);
  std::lock_guard lock(mutex_);
  do {
    s->id = new_id();
  } while (index_.count(s->id));
  lru_.push_front(s);
  index_[s->id] = lru_.begin();
  while (lru_.size() > capacity_) {
    index_.erase(lru_.back()->id);
    lru_.pop_back();
  }
  return s;
}

std::shared_ptr<Session> SessionStore::find(const std::string& id) {
  std::lock_guard lock(mutex_);
  auto it = index_.find(id);
  if (it == index_.end()) return nullptr;
  lru_.splice(lru_.begin(), lru_, it->second);
  return *it->second;
}

std::size_t SessionStore::size() const {
  std::lock_guard lock(mutex_);
  return lru_.size();
}

// ---------------------------------------------------------------------------

EditService::EditService(std::shared_ptr<const Workspace> workspace, std::size_t max_sessions)
    : workspace_(std::move(workspace)), sessions_(max_sessions) {
  if (!workspace_) throw ConfigError("service needs a workspace");
}

HttpReply EditService::health() const {
  return json_reply(200, {{"status", "ok"}, {"checkpoint_version", kCheckpointFormatVersion}});
}

HttpReply EditService::directions() const {
  Json arr = Json::array();
  for (const auto& d : workspace_->directions().all()) {
    arr.push_back({{"name", d.name}, {"method", to_string(d.method)}, {"sigma", d.sigma}});
  }
  return json_reply(200, arr);
}

HttpReply EditService::invert(const std::string& body) {
  HttpReply reply;
  auto j = parse_body(body, reply);
  if (!j) return reply;
  if (!j->contains("image") || !j->at("image").is_string()) return error_reply(400, "missing string field 'image'");
  ImageTensor image;
  try {
    image = decode_png(base64_decode(j->at("image").get<std::string>()));
  } catch (const std::invalid_argument& e) {
    return error_reply(400, std::string("image is not valid base64: ") + e.what());
  } catch (const IoError& e) {
    return error_reply(400, std::string("image is not a readable PNG: ") + e.what());
  }
  try {
    auto prepared = workspace_->prepare(image);
    auto bundle = workspace_->invert(prepared);
    Json out = {{"metrics", {{"psnr_w", bundle.psnr_w}, {"psnr_wplus", bundle.psnr_wplus}, {"psnr_f", bundle.psnr_f}}},
                {"images",
                 {{"w", png_base64(bundle.rec_w)},
                  {"wplus", png_base64(bundle.rec_wplus)},
                  {"f", png_base64(bundle.rec_f)}}}};
    auto session = sessions_.create(std::move(prepared), std::move(bundle));
    out["session_id"] = session->id;
    return json_reply(200, out);
  } catch (const std::exception& e) {
    return internal_error(e);
  }
}

HttpReply EditService::edit(const std::string& body) {
  HttpReply reply;
  auto j = parse_body(body, reply);
  if (!j) return reply;
  AppliedEdit req;
  std::string session_id;
  try {
    session_id = j->at("session_id").get<std::string>();
    req.direction = j->at("direction").get<std::string>();
    req.alpha = j->at("alpha").get<double>();
    req.mode = edit_mode_from_string(j->value("mode", std::string("latent_and_feature")));
  } catch (const Json::exception&) {
    return error_reply(400, "expected {session_id: string, direction: string, alpha: number, mode?: string}");
  } catch (const ConfigError& e) {
    return error_reply(400, e.what());
  }
  if (!std::isfinite(req.alpha)) return error_reply(400, "alpha must be finite");
  if (!workspace_->directions().contains(req.direction)) {
    return error_reply(404, "unknown direction '" + req.direction + "'");
  }
  auto session = sessions_.find(session_id);
  if (!session) return error_reply(404, "unknown session '" + session_id + "'");
  try {
    std::lock_guard lock(session->mutex);
    auto image = workspace_->edit(session->bundle.result, {req.direction, req.alpha, req.mode});
    session->history.push_back(req);
    return json_reply(200, {{"image", png_base64(image)},
                            {"applied", {{"direction", req.direction}, {"alpha", req.alpha}, {"mode", to_string(req.mode)}}}});
  } catch (const std::exception& e) {
    return internal_error(e);
  }
}

void EditService::mount(httplib::Server& server, const std::string& static_dir) {
  auto send = [](httplib::Response& res, const HttpReply& r) {
    res.status = r.status;
    res.set_content(r.body, "application/json");
  };
  server.Get("/api/health", [this, send](const httplib::Request&, httplib::Response& res) { send(res, health()); });
  server.Get("/api/directions",
             [this, send](const httplib::Request&, httplib::Response& res) { send(res, directions()); });
  server.Post("/api/invert",
              [this, send](const httplib::Request& req, httplib::Response& res) { send(res, invert(req.body)); });
  server.Post("/api/edit",
              [this, send](const httplib::Request& req, httplib::Response& res) { send(res, edit(req.body)); });
  server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      auto r = internal_error(e);
      res.status = r.status;
      res.set_content(r.body, "application/json");
    } catch (...) {
      auto r = internal_error(std::runtime_error("unknown exception"));
      res.status = r.status;
      res.set_content(r.body, "application/json");
    }
  });
  if (!static_dir.empty()) server.set_mount_point("/", static_dir);
}

bool serve_http(std::shared_ptr<const Workspace> workspace, const std::string& host, int port,
                std::size_t max_sessions, const std::string& static_dir) {
  EditService service(std::move(workspace), max_sessions);
  httplib::Server server;
  service.mount(server, static_dir);
  return server.listen(host, port);
}

}  // namespace clcae
