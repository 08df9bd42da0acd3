#pragma once

#include <cstddef>
#include <list>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "run.hpp"

namespace httplib {
class Server;
}

namespace clcae {

struct AppliedEdit {
  std::string direction;
  double alpha = 0.0;
  EditMode mode = EditMode::LatentAndFeature;
};

struct Session {
  std::string id;
  ImageTensor source;
  InversionBundle bundle;
  std::vector<AppliedEdit> history;
  std::mutex mutex;  // serializes edits on this session
};

// In-memory sessions with least-recently-used eviction.
class SessionStore {
 public:
  explicit SessionStore(std::size_t capacity = 256);

  std::shared_ptr<Session> create(ImageTensor source, InversionBundle bundle);
  std::shared_ptr<Session> find(const std::string& id);  // null when unknown or evicted
  std::size_t size() const;
  std::size_t capacity() const { return capacity_; }

 private:
  std::string new_id();

  std::size_t capacity_;
  mutable std::mutex mutex_;
  std::list<std::shared_ptr<Session>> lru_;  // front = most recent
  std::unordered_map<std::string, std::list<std::shared_ptr<Session>>::iterator> index_;
};

struct HttpReply {
  int status = 200;
  std::string body;  // JSON
};

// JSON API over a loaded workspace. Handlers are transport-independent so
// they can be exercised without sockets; mount() wires them into httplib.
class EditService {
 public:
  EditService(std::shared_ptr<const Workspace> workspace, std::size_t max_sessions = 256);

  HttpReply health() const;
  HttpReply directions() const;
  HttpReply invert(const std::string& body);
  HttpReply edit(const std::string& body);

  void mount(httplib::Server& server, const std::string& static_dir = {});
  SessionStore& sessions() { return sessions_; }

 private:
  std::shared_ptr<const Workspace> workspace_;
  SessionStore sessions_;
};

// Blocks until the server stops. Returns false when binding fails.
bool serve_http(std::shared_ptr<const Workspace> workspace, const std::string& host, int port,
                std::size_t max_sessions = 256, const std::string& static_dir = {});

}  // namespace clcae
