#include "cnnp/server.hpp"

#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <mutex>
#include <thread>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "cnnp/pruner.hpp"
#include "cnnp/vis.hpp"

namespace cnnp {

std::string_view to_string(JobKind k) {
  switch (k) {
    case JobKind::prune: return "prune";
    case JobKind::auto_prune: return "auto_prune";
    case JobKind::profile: return "profile";
  }
  return "?";
}

std::string_view to_string(JobStatus s) {
  switch (s) {
    case JobStatus::queued: return "queued";
    case JobStatus::running: return "running";
    case JobStatus::done: return "done";
    case JobStatus::failed: return "failed";
  }
  return "?";
}

nlohmann::json to_json(const JobSnapshot& job) {
  nlohmann::json j = {{"id", job.id},
                      {"kind", to_string(job.kind)},
                      {"status", to_string(job.status)},
                      {"node_id", job.node_id},
                      {"result_nodes", job.result_nodes}};
  j["progress"] = job.progress ? to_json(*job.progress) : nlohmann::json(nullptr);
  j["error"] = job.error ? nlohmann::json{{"code", job.error->code},
                                          {"message", job.error->message},
                                          {"detail", job.error->detail}}
                         : nlohmann::json(nullptr);
  return j;
}

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::not_found: return 404;
    case ErrorCode::busy: return 409;
    case ErrorCode::io: return 500;
    default: return 400;
  }
}

namespace {

using Work = std::function<void(std::stop_token, const std::function<void(const FineTuneProgress&)>&,
                                const std::function<void(NodeId)>&)>;

struct JobRecord {
  JobSnapshot snap;
  Work work;
  std::stop_source stop;
};

void send_json(httplib::Response& res, const nlohmann::json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, std::string_view code, const std::string& message,
                const std::string& detail = {}) {
  send_json(res, {{"code", code}, {"message", message}, {"detail", detail}}, status);
}

std::int64_t path_int(const httplib::Request& req, std::size_t i) { return std::stoll(req.matches[i].str()); }

nlohmann::json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return nlohmann::json::object();
  try {
    auto j = nlohmann::json::parse(req.body);
    if (!j.is_object()) throw Error(ErrorCode::invalid_argument, "request body must be a JSON object");
    return j;
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::invalid_argument, std::string("request body is not valid JSON: ") + e.what());
  }
}

double query_double(const httplib::Request& req, const std::string& key) {
  const auto v = req.get_param_value(key);
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw Error(ErrorCode::invalid_argument, "query parameter " + key + " must be a number", key);
  }
}

nlohmann::json tree_node_json(const NodeMeta& m) {
  return {{"id", m.id},
          {"parent", m.parent ? nlohmann::json(*m.parent) : nlohmann::json(nullptr)},
          {"children", m.children},
          {"filter_count", m.filter_count},
          {"layer_filters", m.layer_filters},
          {"accuracy", m.accuracy},
          {"compression_ratio", m.compression_ratio},
          {"storage_bytes", m.storage_bytes},
          {"params", m.params},
          {"flops", m.flops},
          {"converged", m.converged},
          {"origin", m.plan ? nlohmann::json(to_string(m.plan->origin)) : nlohmann::json(nullptr)}};
}

}  // namespace

struct Server::Impl {
  std::shared_ptr<Session> session;
  ServerOptions options;
  httplib::Server http;
  bool bound = false;

  mutable std::mutex jobs_mutex;
  std::condition_variable_any jobs_cv;
  mutable std::condition_variable_any done_cv;
  std::map<std::int64_t, JobRecord> jobs;
  std::deque<std::int64_t> queue;
  std::int64_t next_job = 1;
  std::optional<std::int64_t> active;  // queued or running
  std::jthread worker;

  Impl(std::shared_ptr<Session> s, ServerOptions o) : session(std::move(s)), options(std::move(o)) {
    worker = std::jthread([this](std::stop_token st) { run_worker(st); });
    routes();
  }

  ~Impl() {
    http.stop();
    {
      std::lock_guard lock(jobs_mutex);
      for (auto& [id, j] : jobs) j.stop.request_stop();
    }
    worker.request_stop();
    jobs_cv.notify_all();
  }

  void run_worker(std::stop_token st) {
    while (true) {
      std::int64_t id;
      Work work;
      std::stop_token job_stop;
      {
        std::unique_lock lock(jobs_mutex);
        if (!jobs_cv.wait(lock, st, [&] { return !queue.empty(); })) return;
        id = queue.front();
        queue.pop_front();
        auto& rec = jobs.at(id);
        rec.snap.status = JobStatus::running;
        work = rec.work;
        job_stop = rec.stop.get_token();
      }
      std::optional<JobError> error;
      try {
        work(
            job_stop,
            [&](const FineTuneProgress& p) {
              std::lock_guard lock(jobs_mutex);
              jobs.at(id).snap.progress = p;
            },
            [&](NodeId n) {
              std::lock_guard lock(jobs_mutex);
              jobs.at(id).snap.result_nodes.push_back(n);
            });
      } catch (const Error& e) {
        error = JobError{std::string(to_string(e.code())), e.what(), e.detail()};
      } catch (const std::exception& e) {
        error = JobError{"internal", e.what(), {}};
      }
      {
        std::lock_guard lock(jobs_mutex);
        auto& rec = jobs.at(id);
        rec.snap.status = error ? JobStatus::failed : JobStatus::done;
        rec.snap.error = std::move(error);
        rec.work = nullptr;
        active.reset();
        spdlog::info("job {} {}", id, to_string(rec.snap.status));
      }
      done_cv.notify_all();
    }
  }

  JobSnapshot submit(JobKind kind, NodeId node, Work work) {
    std::lock_guard lock(jobs_mutex);
    if (active) {
      throw Error(ErrorCode::busy, "session busy", "job " + std::to_string(*active) + " is " +
                                                      std::string(to_string(jobs.at(*active).snap.status)));
    }
    const auto id = next_job++;
    JobRecord rec;
    rec.snap.id = id;
    rec.snap.kind = kind;
    rec.snap.node_id = node;
    rec.work = std::move(work);
    const JobSnapshot snap = rec.snap;
    jobs.emplace(id, std::move(rec));
    queue.push_back(id);
    active = id;
    jobs_cv.notify_all();
    return snap;
  }

  NodeMeta require_node(const httplib::Request& req, std::size_t i) const {
    return session->node(path_int(req, i));
  }

  template <typename F>
  httplib::Server::Handler guard(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
      try {
        f(req, res);
      } catch (const Error& e) {
        send_error(res, http_status(e.code()), to_string(e.code()), e.what(), e.detail());
      } catch (const nlohmann::json::exception& e) {
        send_error(res, 400, to_string(ErrorCode::invalid_argument), e.what());
      } catch (const std::out_of_range& e) {
        send_error(res, 404, to_string(ErrorCode::not_found), e.what());
      } catch (const std::exception& e) {
        send_error(res, 500, "internal", e.what());
      }
    };
  }

  PruningPlan preview_plan(NodeId id, const nlohmann::json& body, const SensitivityProfile* profile) const {
    PruningPlan plan;
    const int given = body.contains("plan") + body.contains("count") + body.contains("fraction");
    if (given != 1) throw Error(ErrorCode::invalid_argument, "give exactly one of plan, count or fraction");
    if (body.contains("plan")) {
      plan = plan_from_json(body["plan"]);
    } else {
      if (!profile) throw Error(ErrorCode::not_found, "profile for node " + std::to_string(id) + " is not computed");
      plan = body.contains("count") ? plan_from_threshold(*profile, body["count"].get<Index>())
                                    : plan_from_fraction(*profile, body["fraction"].get<double>());
    }
    if (body.contains("add") || body.contains("remove")) {
      std::vector<FilterRef> add, remove;
      for (const auto& f : body.value("add", nlohmann::json::array())) add.push_back(filter_from_json(f));
      for (const auto& f : body.value("remove", nlohmann::json::array())) remove.push_back(filter_from_json(f));
      plan = refine_plan(session->model(id)->architecture(), plan, add, remove);
    }
    plan.node_id = id;
    return plan;
  }

  void routes() {
    // SO_REUSEADDR only: the default SO_REUSEPORT would let two servers share a port.
    http.set_socket_options([](socket_t sock) {
      int yes = 1;
      setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
    });
    if (options.static_dir) http.set_mount_point("/", options.static_dir->string());
    http.Get("/api/health", guard([](const httplib::Request&, httplib::Response& res) {
               send_json(res, {{"status", "ok"}});
             }));

    http.Get("/api/tree", guard([this](const httplib::Request&, httplib::Response& res) {
               nlohmann::json nodes = nlohmann::json::array();
               for (const auto& m : session->nodes()) nodes.push_back(tree_node_json(m));
               send_json(res, {{"root_id", session->root_id()}, {"nodes", nodes}});
             }));

    http.Get(R"(/api/node/(\d+))", guard([this](const httplib::Request& req, httplib::Response& res) {
               send_json(res, to_json(require_node(req, 1)));
             }));

    http.Get(R"(/api/node/(\d+)/stats)", guard([this](const httplib::Request& req, httplib::Response& res) {
               const auto m = require_node(req, 1);
               nlohmann::json j = {{"id", m.id},
                                   {"params", m.params},
                                   {"flops", m.flops},
                                   {"storage_bytes", m.storage_bytes},
                                   {"accuracy", m.accuracy},
                                   {"compression_ratio", m.compression_ratio},
                                   {"converged", m.converged},
                                   {"filter_count", m.filter_count},
                                   {"path", session->path_to(m.id)}};
               j["trace"] = m.trace ? to_json(*m.trace) : nlohmann::json(nullptr);
               j["statistics"] = m.trace ? to_json(trace_statistics(*m.trace)) : nlohmann::json(nullptr);
               send_json(res, j);
             }));

    http.Get(R"(/api/node/(\d+)/confusion)", guard([this](const httplib::Request& req, httplib::Response& res) {
               const auto m = require_node(req, 1);
               auto j = to_json(confusion_from_counts(m.confusion));
               j["class_names"] = session->data().test.class_names;
               j["id"] = m.id;
               send_json(res, j);
             }));

    http.Get(R"(/api/node/(\d+)/confusion/(\d+)/(\d+)/history)",
             guard([this](const httplib::Request& req, httplib::Response& res) {
               const NodeId id = require_node(req, 1).id;
               const Index i = path_int(req, 2), j = path_int(req, 3);
               send_json(res, {{"id", id},
                               {"cell", {i, j}},
                               {"path", session->path_to(id)},
                               {"values", session->confusion_cell_history(id, i, j)}});
             }));

    http.Get(R"(/api/node/(\d+)/profile)", guard([this](const httplib::Request& req, httplib::Response& res) {
               const NodeId id = require_node(req, 1).id;
               if (session->has_profile(id)) {
                 send_json(res, to_json(*session->profile(id)));
                 return;
               }
               {
                 std::lock_guard lock(jobs_mutex);
                 if (active) {
                   const auto& snap = jobs.at(*active).snap;
                   if (snap.kind == JobKind::profile && snap.node_id == id) {
                     send_json(res, to_json(snap), 202);
                     return;
                   }
                 }
               }
               auto s = session;
               const auto snap = submit(JobKind::profile, id, [s, id](auto, auto&, auto&) { s->profile(id); });
               send_json(res, to_json(snap), 202);
             }));

    http.Post(R"(/api/node/(\d+)/plan/preview)", guard([this](const httplib::Request& req, httplib::Response& res) {
                const NodeId id = require_node(req, 1).id;
                const auto body = parse_body(req);
                std::shared_ptr<const SensitivityProfile> profile;
                if (session->has_profile(id)) profile = session->profile(id);
                const PruningPlan plan = preview_plan(id, body, profile.get());
                const auto arch = session->model(id)->architecture();
                nlohmann::json violations = nlohmann::json::array();
                for (const auto& v : validate_plan(arch, plan)) {
                  violations.push_back({{"kind", to_string(v.kind)}, {"filter", to_json(v.filter)}, {"message", v.message}});
                }
                nlohmann::json fractions = nlohmann::json::array();
                for (const auto& [layer, frac] : plan_layer_fractions(arch, plan)) {
                  fractions.push_back({{"layer", layer}, {"fraction", frac}});
                }
                nlohmann::json j = {{"plan", to_json(plan)}, {"violations", violations}, {"layer_fractions", fractions}};
                if (profile && violations.empty()) {
                  const auto impact = plan_impact(*profile, plan);
                  j["impact"] = {{"remaining_filters_pct", impact.remaining_filters_pct},
                                 {"remaining_sensitivity_pct", impact.remaining_sensitivity_pct},
                                 {"remaining_instability_pct", impact.remaining_instability_pct}};
                } else {
                  j["impact"] = nullptr;
                }
                send_json(res, j);
              }));

    http.Post(R"(/api/node/(\d+)/prune)", guard([this](const httplib::Request& req, httplib::Response& res) {
                const NodeId id = require_node(req, 1).id;
                const auto body = parse_body(req);
                if (!body.contains("plan")) throw Error(ErrorCode::invalid_argument, "body needs a plan", "plan");
                PruningPlan plan = plan_from_json(body["plan"]);
                const auto arch = session->model(id)->architecture();
                if (plan.filters.empty()) throw Error(ErrorCode::invalid_plan, "plan must remove at least one filter");
                if (const auto v = validate_plan(arch, plan); !v.empty()) {
                  throw Error(ErrorCode::invalid_plan, v.front().message, std::string(to_string(v.front().kind)));
                }
                const FineTuneConfig cfg = finetune_config_from_json(
                    body.value("finetune_config", nlohmann::json::object()), session->defaults().finetune);
                validate(cfg);
                auto s = session;
                const auto snap = submit(JobKind::prune, id, [s, id, plan, cfg](std::stop_token st, auto& progress, auto& on_node) {
                  on_node(s->prune_node(id, plan, cfg, progress, st));
                });
                send_json(res, to_json(snap), 202);
              }));

    http.Post(R"(/api/node/(\d+)/autoprune)", guard([this](const httplib::Request& req, httplib::Response& res) {
                const NodeId id = require_node(req, 1).id;
                const auto body = parse_body(req);
                if (!body.contains("ratio")) throw Error(ErrorCode::invalid_argument, "body needs a ratio", "ratio");
                const double ratio = body["ratio"].get<double>();
                const double stop_acc = body.value("stop_accuracy", session->defaults().finetune.target_accuracy);
                if (!(ratio > 0.0 && ratio < 1.0)) throw Error(ErrorCode::invalid_argument, "ratio must be in (0, 1)", "ratio");
                if (!(stop_acc >= 0.0 && stop_acc <= 1.0)) {
                  throw Error(ErrorCode::invalid_argument, "stop_accuracy must be in [0, 1]", "stop_accuracy");
                }
                const FineTuneConfig cfg = finetune_config_from_json(
                    body.value("finetune_config", nlohmann::json::object()), session->defaults().finetune);
                validate(cfg);
                auto s = session;
                const auto snap = submit(JobKind::auto_prune, id,
                                         [s, id, ratio, stop_acc, cfg](std::stop_token st, auto& progress, auto& on_node) {
                                           s->auto_prune(id, ratio, stop_acc, cfg, progress, st, on_node);
                                         });
                send_json(res, to_json(snap), 202);
              }));

    http.Get("/api/estimate", guard([this](const httplib::Request& req, httplib::Response& res) {
               if (!req.has_param("a") || !req.has_param("b")) {
                 throw Error(ErrorCode::invalid_argument, "estimate needs node ids a and b");
               }
               const NodeId a = static_cast<NodeId>(query_double(req, "a"));
               const NodeId b = static_cast<NodeId>(query_double(req, "b"));
               EstimateQuery q;
               if (req.has_param("target_accuracy")) q.target_accuracy = query_double(req, "target_accuracy");
               if (req.has_param("target_filters")) q.target_filters = query_double(req, "target_filters");
               const auto e = session->estimate(a, b, q);
               nlohmann::json j = {{"a", a}, {"b", b}};
               j["filters"] = e.filters ? nlohmann::json(*e.filters) : nlohmann::json(nullptr);
               j["accuracy"] = e.accuracy ? nlohmann::json(*e.accuracy) : nlohmann::json(nullptr);
               send_json(res, j);
             }));

    http.Get(R"(/api/diff/(\d+)/(\d+))", guard([this](const httplib::Request& req, httplib::Response& res) {
               const NodeId p = require_node(req, 1).id, c = require_node(req, 2).id;
               const auto& test = session->data().test;
               const auto diff = diff_instances(*session->model(p), *session->model(c), test);
               nlohmann::json j = {{"parent", p}, {"child", c}, {"diff", to_json(diff)}};
               if (req.get_param_value("embedding") != "0") {
                 TsneOptions opt = options.tsne;
                 if (req.has_param("perplexity")) opt.perplexity = query_double(req, "perplexity");
                 const auto seed = req.has_param("seed") ? static_cast<std::uint64_t>(query_double(req, "seed")) : 0;
                 j["embedding"] = to_json(embed_instances(diff, test, seed, opt));
               } else {
                 j["embedding"] = nullptr;
               }
               send_json(res, j);
             }));

    auto saliency = [this](const httplib::Request& req) {
      const NodeId id = require_node(req, 1).id;
      const FilterRef f{static_cast<std::size_t>(path_int(req, 2)), path_int(req, 3)};
      if (!req.has_param("image_id")) throw Error(ErrorCode::invalid_argument, "image_id is required", "image_id");
      const auto& test = session->data().test;
      const std::size_t idx = test.index_of(req.get_param_value("image_id"));
      const Index c = test.images.dim(1), h = test.images.dim(2), w = test.images.dim(3);
      Tensorf image({c, h, w});
      image.vec() = test.images.vec().segment(static_cast<Index>(idx) * c * h * w, c * h * w);
      return guided_backprop(*session->model(id), image, f);
    };

    http.Get(R"(/api/vis/(\d+)/(\d+)/(\d+))", guard([saliency](const httplib::Request& req, httplib::Response& res) {
               res.set_content(saliency_png(saliency(req)), "image/png");
             }));

    http.Get(R"(/api/vis/(\d+)/(\d+)/(\d+)/histogram)",
             guard([saliency](const httplib::Request& req, httplib::Response& res) {
               const int bins = req.has_param("bins") ? static_cast<int>(query_double(req, "bins")) : 32;
               const auto map = saliency(req);
               send_json(res, {{"bins", bins}, {"counts", pixel_histogram(map, bins)}, {"pixels", map.size()}});
             }));

    http.Get(R"(/api/job/(\d+))", guard([this](const httplib::Request& req, httplib::Response& res) {
               std::lock_guard lock(jobs_mutex);
               const auto it = jobs.find(path_int(req, 1));
               if (it == jobs.end()) throw Error(ErrorCode::not_found, "no job " + req.matches[1].str());
               send_json(res, to_json(it->second.snap));
             }));

    http.Delete(R"(/api/job/(\d+))", guard([this](const httplib::Request& req, httplib::Response& res) {
                  std::lock_guard lock(jobs_mutex);
                  const auto it = jobs.find(path_int(req, 1));
                  if (it == jobs.end()) throw Error(ErrorCode::not_found, "no job " + req.matches[1].str());
                  it->second.stop.request_stop();
                  send_json(res, to_json(it->second.snap));
                }));

    http.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
      if (res.status == 404 && res.body.empty()) {
        send_error(res, 404, to_string(ErrorCode::not_found), "no route for " + req.method + " " + req.path);
      }
    });
  }
};

Server::Server(std::shared_ptr<Session> session, ServerOptions options)
    : impl_(std::make_unique<Impl>(std::move(session), std::move(options))) {}

Server::~Server() = default;

int Server::bind(const std::string& host, int port) {
  int bound;
  if (port == 0) {
    bound = impl_->http.bind_to_any_port(host);
    if (bound <= 0) throw Error(ErrorCode::io, "cannot bind " + host);
  } else {
    if (!impl_->http.bind_to_port(host, port)) {
      throw Error(ErrorCode::io, "cannot bind " + host + ":" + std::to_string(port) + " (address in use?)");
    }
    bound = port;
  }
  impl_->bound = true;
  return bound;
}

void Server::listen() {
  if (!impl_->bound) throw Error(ErrorCode::invalid_argument, "bind() must precede listen()");
  impl_->http.listen_after_bind();
}

void Server::stop() { impl_->http.stop(); }

std::optional<JobSnapshot> Server::job(std::int64_t id) const {
  std::lock_guard lock(impl_->jobs_mutex);
  const auto it = impl_->jobs.find(id);
  if (it == impl_->jobs.end()) return std::nullopt;
  return it->second.snap;
}

JobSnapshot Server::wait(std::int64_t id) const {
  std::unique_lock lock(impl_->jobs_mutex);
  const auto it = impl_->jobs.find(id);
  if (it == impl_->jobs.end()) throw Error(ErrorCode::not_found, "no job " + std::to_string(id));
  impl_->done_cv.wait(lock, [&] {
    const auto s = it->second.snap.status;
    return s == JobStatus::done || s == JobStatus::failed;
  });
  return it->second.snap;
}

}  // namespace cnnp
