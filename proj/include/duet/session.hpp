#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "duet/lm_core.hpp"
#include "duet/rq_tokenizer.hpp"
#include "duet/token_codec.hpp"

namespace duet {

/// Multi-turn conversation with a trained model. The token sequence always
/// scans into text and motion segments; generated motions are decoded into the
/// clip registry and can be attached to later turns.
class Session {
  public:
    struct Reply {
        std::string text;
        std::vector<std::string> clips;
        /// Oldest turns were left out of the model context.
        int dropped_turns = 0;
    };

    Session(ModelParams model, TokenizerParams tokenizer, SamplingConfig sampling, std::filesystem::path out_dir);

    /// Appends a user turn (text, then each attachment as a motion span) and the
    /// generated assistant turn. Attachments are registry ids or motion file
    /// paths. On any error nothing is committed.
    Reply turn(const std::string& text, const std::vector<std::string>& attachments = {});

    const TokenIds& tokens() const { return tokens_; }
    const VocabManifest& manifest() const { return manifest_; }
    const std::map<std::string, std::filesystem::path>& registry() const { return registry_; }

    /// {"manifest": ..., "segments": [{"kind":"text","text":...} | {"kind":"motion","grid":{...}}]}
    nlohmann::json transcript() const;
    static TokenIds retokenize(const nlohmann::json& transcript);

  private:
    ModelParams model_;
    TokenizerParams tokenizer_;
    SamplingConfig sampling_;
    std::filesystem::path out_dir_;
    VocabManifest manifest_;
    ByteTokenizer text_;
    TokenIds tokens_;
    /// Committed user+assistant exchanges as token ranges of tokens_. All but
    /// the first start with a separator of `separator` tokens.
    struct Exchange {
        std::size_t begin = 0;
        std::size_t end = 0;
        std::size_t separator = 0;
    };
    std::vector<Exchange> exchanges_;
    std::map<std::string, std::filesystem::path> registry_;
    int generated_ = 0;
};

nlohmann::json grid_to_json(const CodeGrid& g);
CodeGrid grid_from_json(const nlohmann::json& j);

}  // namespace duet
