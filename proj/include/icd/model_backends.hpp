#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <variant>

#include "icd/errors.hpp"
#include "icd/messages.hpp"

// Uniform completion interface: a remote OpenAI-compatible chat client for
// real experiments plus deterministic scripted policies that keep the whole
// pipeline testable offline.

namespace icd::backend {

struct BackendError : Error {
  using Error::Error;
};
struct Timeout : BackendError {
  Timeout() : BackendError("backend request timed out") {}
};
struct HttpStatus : BackendError {
  int status;
  explicit HttpStatus(int status_, const std::string& body = "")
      : BackendError("backend returned HTTP " + std::to_string(status_) +
                     (body.empty() ? "" : ": " + body)),
        status(status_) {}
};
struct AuthMissing : BackendError {
  explicit AuthMissing(const std::string& env_var)
      : BackendError("API key environment variable not set: " + env_var) {}
};

struct RemoteConfig {
  std::string base_url;            // e.g. https://api.openai.com/v1
  std::string model_name;
  std::string api_key_env = "OPENAI_API_KEY";
  double temperature = 0.0;
  int timeout_ms = 60000;
  int max_retries = 0;
};

struct ScriptedConfig {
  std::string policy_name;  // gold | deceivable | context_sensitive
  std::uint64_t seed = 0;
};

struct BackendConfig {
  std::variant<RemoteConfig, ScriptedConfig> kind;

  bool is_scripted() const { return std::holds_alternative<ScriptedConfig>(kind); }
};

struct Completion {
  std::string text;  // may be empty; scored as a failure upstream
  int latency_ms = 0;
  std::optional<std::pair<int, int>> token_counts;  // (prompt, completion)
};

class Backend {
 public:
  virtual ~Backend() = default;
  virtual Completion complete(const MessageSequence& messages) = 0;
};

// Marker line the experiment runner appends to scripted-run observations to
// hand oracle policies the fixture's gold action. Stripped from everything a
// remote backend sees.
inline constexpr std::string_view kGoldHintPrefix = "[gold-hint] ";

std::string gold_hint_line(const std::string& action_line);

// Scripted policies: pure, deterministic functions of (messages, seed).
//
// deceivable_policy models the undefended failure mode: it follows any
// imperative "click <n>" embedded in the live page, clicks ad targets, picks
// the later of two consecutive input choices in a round-two list, and only
// otherwise falls back to the gold hint (or STOP).
std::string deceivable_policy(const MessageSequence& messages);

// gold_policy always emits the gold-hint action; STOP [""] when the hint is
// absent. Oracle for SR ceilings.
std::string gold_policy(const MessageSequence& messages);

// context_sensitive_policy simulates exemplar-conditioned defense for
// pipeline verification (it is a harness instrument, not a model claim):
// defensive exemplars in the context enable per-category detectors
// (popup-imperative / duplicate-field / ad-overlay); with no defensive
// exemplar it behaves exactly like deceivable_policy. Output section order
// follows the exemplars'.
std::string context_sensitive_policy(const MessageSequence& messages);

class ScriptedBackend : public Backend {
 public:
  explicit ScriptedBackend(ScriptedConfig config);
  Completion complete(const MessageSequence& messages) override;

  static bool known_policy(std::string_view name);

 private:
  ScriptedConfig config_;
};

// Injectable transport so tests exercise the wire format without a network.
struct HttpResponse {
  int status = 0;
  std::string body;
};
using Transport = std::function<HttpResponse(const std::string& url, const std::string& body,
                                             const std::map<std::string, std::string>& headers)>;

class RemoteBackend : public Backend {
 public:
  explicit RemoteBackend(RemoteConfig config, Transport transport = nullptr);

  // POSTs <base_url>/chat/completions with model/messages/temperature,
  // bearer token from the configured environment variable, image refs that
  // name readable files attached as base64 data URLs. Throws AuthMissing
  // before any network activity when the key is unset.
  Completion complete(const MessageSequence& messages) override;

  // Exposed for tests: the exact request body for a message sequence.
  std::string build_request_body(const MessageSequence& messages) const;

 private:
  RemoteConfig config_;
  Transport transport_;
};

std::unique_ptr<Backend> make_backend(const BackendConfig& config);

}  // namespace icd::backend
