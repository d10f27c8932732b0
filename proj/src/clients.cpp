#include "duet/clients.hpp"

#include <regex>

#include "duet/params.hpp"
#include "duet/synthetic.hpp"

// After Eigen: glibc resolv.h defines a _res macro.
#include "httplib.h"

namespace duet {

namespace detail {
const std::vector<std::pair<std::string, std::string>>& embedded_assets();
}

std::vector<std::string> PromptTemplate::slots() const {
    static const std::regex slot(R"(\{\{(\w+)\}\})");
    std::vector<std::string> out;
    for (auto it = std::sregex_iterator(text.begin(), text.end(), slot); it != std::sregex_iterator(); ++it) {
        const std::string name = (*it)[1].str();
        if (std::find(out.begin(), out.end(), name) == out.end()) out.push_back(name);
    }
    return out;
}

std::string PromptTemplate::render(const std::map<std::string, std::string>& values) const {
    std::string out;
    out.reserve(text.size());
    std::size_t pos = 0;
    while (true) {
        const std::size_t open = text.find("{{", pos);
        if (open == std::string::npos) break;
        const std::size_t close = text.find("}}", open + 2);
        if (close == std::string::npos) break;
        const std::string name = text.substr(open + 2, close - open - 2);
        auto it = values.find(name);
        if (it == values.end()) throw ValidationError("prompt '" + id + "': no value for slot '" + name + "'");
        out.append(text, pos, open - pos);
        out += it->second;
        pos = close + 2;
    }
    out.append(text, pos, std::string::npos);
    return out;
}

namespace {

std::map<std::string, PromptTemplate> load_prompts() {
    std::map<std::string, PromptTemplate> out;
    const std::string prefix = "prompts/";
    for (const auto& [name, text] : detail::embedded_assets()) {
        if (name.rfind(prefix, 0) != 0) continue;
        const std::string id = name.substr(prefix.size(), name.size() - prefix.size() - 4);
        out[id] = PromptTemplate{id, text};
    }
    return out;
}

const std::map<std::string, PromptTemplate>& prompts() {
    static const std::map<std::string, PromptTemplate> table = load_prompts();
    return table;
}

}  // namespace

const PromptTemplate& prompt_template(const std::string& id) {
    auto it = prompts().find(id);
    if (it == prompts().end()) throw ValidationError("unknown prompt template '" + id + "'");
    return it->second;
}

std::vector<std::string> prompt_template_ids() {
    std::vector<std::string> out;
    for (const auto& [id, t] : prompts()) out.push_back(id);
    return out;
}

void ClientSpec::validate() const {
    if (retries < 0) throw ValidationError("client retry budget must be >= 0");
    if (!(timeout_seconds > 0.0)) throw ValidationError("client timeout must be positive");
    if (endpoint.empty()) throw ValidationError("client endpoint is empty");
}

nlohmann::json ClientSpec::to_json() const {
    return {{"endpoint", endpoint}, {"timeout", timeout_seconds}, {"retries", retries}, {"template", template_id}};
}

ClientSpec ClientSpec::from_json(const nlohmann::json& j) {
    ClientSpec s;
    s.endpoint = j.value("endpoint", s.endpoint);
    s.timeout_seconds = j.value("timeout", s.timeout_seconds);
    s.retries = j.value("retries", s.retries);
    s.template_id = j.value("template", s.template_id);
    s.validate();
    return s;
}

std::string ClientRequest::hash() const {
    nlohmann::json j = {{"template", template_id}, {"slots", slots}, {"nonce", nonce}, {"suffix", suffix}};
    return content_hash(j.dump());
}

namespace {

const char* pick(const std::vector<const char*>& options, std::uint64_t h) { return options[h % options.size()]; }

std::string stub_caption(const std::string& nonce, int which) {
    static const std::vector<const char*> openings = {
        "Two people face each other and", "Two people stand side by side and", "One person approaches the other and",
        "Two people walk towards each other and"};
    static const std::vector<const char*> actions = {
        "shake hands firmly", "hug for a moment", "push each other's shoulders", "wave with their right hands",
        "pass an object from one to the other", "bow to each other", "dance in a slow circle", "spar with quick jabs"};
    const std::uint64_t h = fnv1a64(nonce + "#" + std::to_string(which));
    return std::string(pick(openings, h)) + " " + pick(actions, h >> 8) + ", in take " + nonce + "-" +
           std::to_string(which) + ".";
}

}  // namespace

std::string StubLlmClient::complete(const ClientRequest& r) {
    const std::string& t = r.template_id;
    auto slot = [&](const char* name) {
        auto it = r.slots.find(name);
        return it == r.slots.end() ? std::string() : it->second;
    };
    if (t == "editing_caption") {
        return "The second person changes their mind.\nMotion 2: [" + slot("motion1_caption") +
               " Then the second person turns away and walks off.]";
    }
    if (t == "editing_conversation") {
        return "User: Let's create a story starting from [motion_placeholder_1].\n"
               "AI: One person keeps losing patience with the other.\n"
               "User: What if the second person became shy?\n"
               "AI: [motion_placeholder_2]";
    }
    if (t == "reasoning_with_seed") {
        return "User: The current scene is [motion_placeholder_1]. What happened before?\n"
               "AI: The two people had just met and greeted each other.\n"
               "User: Show me what will happen after that in motion format.\n"
               "AI: [" + stub_caption(r.nonce, 2) + "]";
    }
    if (t == "editing_no_base" || t == "reasoning_no_base") {
        return "User: Let's create a story starting from [" + stub_caption(r.nonce, 1) + "].\n"
               "AI: They know each other well and are in a good mood.\n"
               "User: How would the scene continue?\n"
               "AI: [" + stub_caption(r.nonce, 2) + "]";
    }
    if (t == "judge") {
        return R"({"scores": {"Logical Coherence": {"Justification": "consistent", "Score": 7},)"
               R"( "Content Alignment": {"Justification": "matches the captions", "Score": 6},)"
               R"( "Naturalness": {"Justification": "fluent", "Score": 8}}})";
    }
    throw ClientError("stub client has no response for template '" + t + "'");
}

MotionRecord StubMotionClient::generate(const std::string& caption, int frames, std::uint64_t seed) {
    if (frames < 1) throw ValidationError("frame count must be positive");
    return MotionRecord::pair(sinusoid_pair(derive_seed(seed, fnv1a64(caption)), frames, skeleton_));
}

HttpChatClient::HttpChatClient(ClientSpec spec, std::string model) : spec_(std::move(spec)), model_(std::move(model)) {
    spec_.validate();
    if (spec_.endpoint.rfind("http://", 0) != 0) throw ValidationError("only http:// endpoints are supported");
}

std::string HttpChatClient::complete(const ClientRequest& request) {
    const std::string rest = spec_.endpoint.substr(7);
    const std::size_t slash = rest.find('/');
    const std::string host = rest.substr(0, slash);
    const std::string path = slash == std::string::npos ? "/v1/chat/completions" : rest.substr(slash);
    httplib::Client client("http://" + host);
    const auto secs = static_cast<time_t>(spec_.timeout_seconds);
    const auto usecs = static_cast<time_t>((spec_.timeout_seconds - static_cast<double>(secs)) * 1e6);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    nlohmann::json body = {{"model", model_},
                           {"messages", nlohmann::json::array({{{"role", "user"}, {"content", request.prompt()}}})}};
    auto res = client.Post(path, body.dump(), "application/json");
    if (!res) throw ClientError("request to " + spec_.endpoint + " failed: " + httplib::to_string(res.error()));
    if (res->status != 200) throw ClientError("endpoint returned HTTP " + std::to_string(res->status));
    try {
        auto j = nlohmann::json::parse(res->body);
        return j.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw ClientError(std::string("unexpected response body: ") + e.what());
    }
}

}  // namespace duet
