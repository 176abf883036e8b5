#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cnnp/instances.hpp"
#include "cnnp/tree.hpp"

namespace cnnp {

enum class JobKind { prune, auto_prune, profile };
enum class JobStatus { queued, running, done, failed };

std::string_view to_string(JobKind k);
std::string_view to_string(JobStatus s);

struct JobError {
  std::string code;
  std::string message;
  std::string detail;
};

struct JobSnapshot {
  std::int64_t id = 0;
  JobKind kind = JobKind::prune;
  JobStatus status = JobStatus::queued;
  NodeId node_id = 0;
  std::optional<FineTuneProgress> progress;
  std::vector<NodeId> result_nodes;
  std::optional<JobError> error;
};

nlohmann::json to_json(const JobSnapshot& job);

struct ServerOptions {
  std::optional<std::filesystem::path> static_dir;  // served at / when set
  TsneOptions tsne;
};

/// HTTP+JSON front of one session. Jobs run on a single background worker;
/// a job submitted while another is queued or running is refused with 409.
class Server {
 public:
  explicit Server(std::shared_ptr<Session> session, ServerOptions options = {});
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Binds `host:port` (port 0 picks a free port) and returns the port.
  /// Throws io when the address is unavailable.
  int bind(const std::string& host, int port);
  /// Serves until stop(); requires bind().
  void listen();
  void stop();

  std::optional<JobSnapshot> job(std::int64_t id) const;
  /// Blocks until the job is done or failed.
  JobSnapshot wait(std::int64_t id) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// HTTP status for an engine error code.
int http_status(ErrorCode code);

}  // namespace cnnp
