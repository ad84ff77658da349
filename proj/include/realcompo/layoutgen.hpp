#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "realcompo/attention.hpp"
#include "realcompo/conditions.hpp"

namespace realcompo {

struct Demonstration {
    std::string prompt;
    std::string layout_json;
};

// In-context prompt for layout generation. Template files are plain text
// split by section markers on their own line:
//
//   [instruction]          task rules (exactly one)
//   [example]              "prompt: ..." line, then the layout JSON (one or more)
//   [query]                the test slot; "{prompt}" is replaced by the user prompt
//
// Lines starting with "#" before the first marker are comments.
struct PromptTemplate {
    std::string instruction;
    std::vector<Demonstration> demonstrations;
    std::string query;

    void validate() const;
    static PromptTemplate parse(const std::string& text);
    static PromptTemplate load(const std::filesystem::path& path);
};

// Path of the template shipped in data/templates.
std::filesystem::path default_template_path();

std::string render_template(const PromptTemplate& tpl, const std::string& user_prompt);

struct LlmEndpointConfig {
    std::string base_url    = "https://api.openai.com/v1";
    std::string model       = "gpt-4";
    std::string api_key_env = "REALCOMPO_LLM_API_KEY";
    double timeout_s        = 30.0;
    int max_retries         = 2;
    std::string template_path;  // empty: bundled default

    void validate() const;
};

enum class LayoutBackend { stub, llm };

const char* to_string(LayoutBackend b);
LayoutBackend parse_layout_backend(const std::string& s);

struct GeneratedLayout {
    Layout layout;
    std::vector<std::string> warnings;
    std::string raw_response;  // empty for the stub
};

// Deterministic offline layout: each recognized blobworld noun, in mention
// order, gets the next slot of a 2-column grid (row-major).
GeneratedLayout stub_layout(const std::string& prompt);

// First syntactically valid JSON array in free text. Throws ParseError
// carrying the text when there is none.
std::string extract_json_array(const std::string& text);

// Parses a reply, normalizes boxes (swap / clamp with warnings), binds labels
// to prompt tokens and validates the result.
GeneratedLayout layout_from_reply(const std::string& reply, const TokenSequence& tokens);

// POSTs a chat-completion request and returns the assistant message text.
// Network failures and 5xx / 429 replies are retried up to max_retries times.
std::string chat_completion(const LlmEndpointConfig& endpoint, const std::string& message);

GeneratedLayout generate_layout(const std::string& prompt, LayoutBackend backend, const LlmEndpointConfig& endpoint);

}  // namespace realcompo
