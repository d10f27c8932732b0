#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "duet/errors.hpp"
#include "duet/motion_repr.hpp"

namespace duet {

// ---- prompt assets ----

struct PromptTemplate {
    std::string id;
    std::string text;

    /// Slot names appearing as {{name}}, in order of first use.
    std::vector<std::string> slots() const;
    /// Throws ValidationError when a slot is left without a value.
    std::string render(const std::map<std::string, std::string>& values) const;
};

/// Shipped templates: editing_no_base, reasoning_no_base, reasoning_with_seed,
/// editing_caption, editing_conversation, judge.
const PromptTemplate& prompt_template(const std::string& id);
std::vector<std::string> prompt_template_ids();

// ---- external clients ----

struct ClientSpec {
    std::string endpoint = "stub";
    double timeout_seconds = 60.0;
    int retries = 2;
    std::string template_id;

    void validate() const;
    nlohmann::json to_json() const;
    static ClientSpec from_json(const nlohmann::json& j);
};

struct ClientRequest {
    std::string template_id;
    std::map<std::string, std::string> slots;
    /// Distinguishes otherwise identical requests (job id); part of the hash.
    std::string nonce;
    /// Appended after the rendered template (re-ask instructions).
    std::string suffix;

    std::string prompt() const { return prompt_template(template_id).render(slots) + suffix; }
    std::string hash() const;
};

/// Raw text completion. Transient failures are reported as ClientError.
class LlmClient {
  public:
    virtual ~LlmClient() = default;
    virtual std::string complete(const ClientRequest& request) = 0;
};

class TextToMotionClient {
  public:
    virtual ~TextToMotionClient() = default;
    virtual MotionRecord generate(const std::string& caption, int frames, std::uint64_t seed) = 0;
};

/// Calls `fn` up to retries + 1 times, retrying on ClientError.
template <class F>
auto with_retry(const ClientSpec& spec, F&& fn) -> decltype(fn()) {
    for (int attempt = 0;; ++attempt) {
        try {
            return fn();
        } catch (const ClientError&) {
            if (attempt >= spec.retries) throw;
        }
    }
}

/// Deterministic offline LLM. Captions are derived from the request slots and
/// nonce, conversations follow the bracket convention of the data prompts, and
/// the judge template gets a fixed score sheet.
class StubLlmClient : public LlmClient {
  public:
    std::string complete(const ClientRequest& request) override;
};

/// Sinusoid pair seeded from the caption text and the request seed.
class StubMotionClient : public TextToMotionClient {
  public:
    explicit StubMotionClient(SkeletonSpec skeleton = {}) : skeleton_(skeleton) {}
    MotionRecord generate(const std::string& caption, int frames, std::uint64_t seed) override;

  private:
    SkeletonSpec skeleton_;
};

/// OpenAI-style chat completion over plain HTTP ("http://host:port/path").
class HttpChatClient : public LlmClient {
  public:
    HttpChatClient(ClientSpec spec, std::string model);
    std::string complete(const ClientRequest& request) override;

  private:
    ClientSpec spec_;
    std::string model_;
};

}  // namespace duet
