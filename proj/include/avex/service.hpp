#pragma once

#include <atomic>
#include <condition_variable>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "avex/active.hpp"

namespace avex {

enum class ProjectStatus { kIdle, kTraining, kAwaitingLabels, kDone };

std::string to_string(ProjectStatus s);

inline constexpr int kApiVersion = 1;

struct ApiResponse {
  int status = 200;
  nlohmann::json body;
};

struct ServiceOptions {
  /// Called on the worker thread before committee training starts.
  std::function<void(const std::string& project_id, int round)> on_training_start;
};

/// Human-in-the-loop active learning over HTTP/JSON. Every project keeps an
/// append-only event log and one learner checkpoint per planned round under
/// `<store>/<project_id>/`; constructing a service on an existing store
/// replays those logs.
class AnnotationService {
 public:
  explicit AnnotationService(std::filesystem::path store, ServiceOptions options = {});
  ~AnnotationService();

  AnnotationService(const AnnotationService&) = delete;
  AnnotationService& operator=(const AnnotationService&) = delete;

  /// Transport-independent request handling.
  ApiResponse handle(const std::string& method, const std::string& path, const std::string& body);

  /// Serves until stop() is called. Returns false if the port cannot be bound.
  bool listen(const std::string& host, int port);
  /// Binds to a free port and serves on a background thread; returns the port.
  int listen_in_background(const std::string& host);
  void stop();

  /// Blocks until no training is running for `project_id` or the timeout expires.
  bool wait_until_settled(const std::string& project_id, std::chrono::milliseconds timeout);

 private:
  struct Project;

  ApiResponse create_project(const nlohmann::json& body);
  ApiResponse start_round(Project& p);
  ApiResponse queries(Project& p);
  ApiResponse annotate(Project& p, const nlohmann::json& body);
  ApiResponse metrics(Project& p);
  ApiResponse labels(Project& p);
  ApiResponse attention(Project& p, const std::string& sample_id);
  ApiResponse summary(Project& p);

  Project* find(const std::string& id);
  void replay(const std::filesystem::path& dir);
  void begin_training(Project& p, std::unique_lock<std::mutex>& lock);
  void run_training(Project* p, int round);

  std::filesystem::path store_;
  ServiceOptions options_;
  std::mutex projects_mutex_;
  std::map<std::string, std::unique_ptr<Project>> projects_;
  int next_id_ = 1;
  struct Http;
  std::unique_ptr<Http> http_;
};

}  // namespace avex
