#include "realcompo/layoutgen.hpp"

#include <httplib.h>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <sstream>
#include <thread>

#include "realcompo/errors.hpp"
#include "realcompo/io.hpp"
#include "realcompo/mixture.hpp"

namespace realcompo {

using nlohmann::json;

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) {
        return "";
    }
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

Demonstration parse_demonstration(const std::string& body) {
    const std::string text = trim(body);
    const auto nl          = text.find('\n');
    const std::string first = trim(text.substr(0, nl));
    if (!starts_with(first, "prompt:")) {
        throw ConfigError("layoutgen", "template example must start with a 'prompt:' line");
    }
    Demonstration d;
    d.prompt      = trim(first.substr(7));
    d.layout_json = nl == std::string::npos ? "" : trim(text.substr(nl + 1));
    if (starts_with(d.layout_json, "layout:")) {
        d.layout_json = trim(d.layout_json.substr(7));
    }
    return d;
}

// Matching close bracket for the '[' at `open`, honouring JSON strings.
std::size_t match_bracket(const std::string& s, std::size_t open) {
    int depth      = 0;
    bool in_string = false;
    for (std::size_t i = open; i < s.size(); ++i) {
        const char c = s[i];
        if (in_string) {
            if (c == '\\') {
                ++i;
            } else if (c == '"') {
                in_string = false;
            }
        } else if (c == '"') {
            in_string = true;
        } else if (c == '[') {
            ++depth;
        } else if (c == ']' && --depth == 0) {
            return i;
        }
    }
    return std::string::npos;
}

struct Endpoint {
    std::string origin;  // scheme://host[:port]
    std::string path;    // prefix, no trailing slash
};

Endpoint split_url(const std::string& url) {
    const auto scheme = url.find("://");
    if (scheme == std::string::npos) {
        throw ConfigError("layoutgen", "endpoint URL must include a scheme: " + url);
    }
    const auto slash = url.find('/', scheme + 3);
    Endpoint e{url.substr(0, slash), slash == std::string::npos ? "" : url.substr(slash)};
    while (!e.path.empty() && e.path.back() == '/') {
        e.path.pop_back();
    }
    return e;
}

}  // namespace

void PromptTemplate::validate() const {
    if (trim(instruction).empty()) {
        throw ConfigError("layoutgen", "template has an empty instruction section");
    }
    if (demonstrations.empty()) {
        throw ConfigError("layoutgen", "template needs at least one example");
    }
    for (const auto& d : demonstrations) {
        if (d.prompt.empty() || d.layout_json.empty()) {
            throw ConfigError("layoutgen", "template example has an empty prompt or layout");
        }
        try {
            layout_from_json(json::parse(d.layout_json));
        } catch (const json::exception& e) {
            throw ConfigError("layoutgen", "template example layout is not valid JSON: " + std::string(e.what()));
        }
    }
    if (query.find("{prompt}") == std::string::npos) {
        throw ConfigError("layoutgen", "template query section lacks the {prompt} slot");
    }
}

PromptTemplate PromptTemplate::parse(const std::string& text) {
    PromptTemplate tpl;
    std::istringstream in(text);
    std::string line, section, body;
    bool seen_instruction = false, seen_query = false;
    auto flush = [&] {
        if (section == "instruction") {
            tpl.instruction = trim(body);
        } else if (section == "example") {
            tpl.demonstrations.push_back(parse_demonstration(body));
        } else if (section == "query") {
            tpl.query = trim(body);
        }
        body.clear();
    };
    while (std::getline(in, line)) {
        const std::string t = trim(line);
        if (t == "[instruction]" || t == "[example]" || t == "[query]") {
            flush();
            section = t.substr(1, t.size() - 2);
            if (section == "instruction") {
                if (seen_instruction) {
                    throw ConfigError("layoutgen", "template has more than one [instruction] section");
                }
                seen_instruction = true;
            } else if (section == "query") {
                if (seen_query) {
                    throw ConfigError("layoutgen", "template has more than one [query] section");
                }
                seen_query = true;
            }
            continue;
        }
        if (section.empty()) {
            if (!t.empty() && t[0] != '#') {
                throw ConfigError("layoutgen", "template text before the first section marker");
            }
            continue;
        }
        body += line;
        body += '\n';
    }
    flush();
    tpl.validate();
    return tpl;
}

PromptTemplate PromptTemplate::load(const std::filesystem::path& path) { return parse(read_text(path)); }

std::filesystem::path default_template_path() {
    return std::filesystem::path(REALCOMPO_DATA_DIR) / "templates" / "default.txt";
}

std::string render_template(const PromptTemplate& tpl, const std::string& user_prompt) {
    tpl.validate();
    const std::string prompt = trim(user_prompt);
    if (prompt.empty()) {
        throw ConfigError("layoutgen", "empty user prompt");
    }
    std::string out = tpl.instruction + "\n\n";
    for (const auto& d : tpl.demonstrations) {
        out += "Prompt: " + d.prompt + "\nLayout: " + d.layout_json + "\n\n";
    }
    std::string query = tpl.query;
    for (auto pos = query.find("{prompt}"); pos != std::string::npos; pos = query.find("{prompt}", pos + prompt.size())) {
        query.replace(pos, 8, prompt);
    }
    return out + query + "\n";
}

void LlmEndpointConfig::validate() const {
    if (!(timeout_s > 0.0)) {
        throw ConfigError("layoutgen", "LLM timeout must be positive");
    }
    if (max_retries < 0) {
        throw ConfigError("layoutgen", "LLM max_retries must be >= 0");
    }
    if (model.empty()) {
        throw ConfigError("layoutgen", "LLM model name is empty");
    }
    split_url(base_url);
}

const char* to_string(LayoutBackend b) { return b == LayoutBackend::stub ? "stub" : "llm"; }

LayoutBackend parse_layout_backend(const std::string& s) {
    if (s == "stub") {
        return LayoutBackend::stub;
    }
    if (s == "llm") {
        return LayoutBackend::llm;
    }
    throw ConfigError("layoutgen", "unknown layout backend '" + s + "' (expected stub|llm)");
}

GeneratedLayout stub_layout(const std::string& prompt) {
    const TokenSequence tokens = TokenSequence::from_prompt(prompt);
    std::vector<int> nouns;
    for (int j : tokens.object_token_indices) {
        if (is_blobworld_noun(tokens.tokens[j]) && tokens.find(tokens.tokens[j]) == j) {
            nouns.push_back(j);
        }
    }
    if (nouns.empty()) {
        throw ConfigError("layoutgen", "stub layout: no recognized object noun in '" + prompt + "'");
    }
    const int rows = (static_cast<int>(nouns.size()) + 1) / 2;
    GeneratedLayout out;
    for (std::size_t k = 0; k < nouns.size(); ++k) {
        const int col = static_cast<int>(k % 2), row = static_cast<int>(k / 2);
        Box b;
        b.x0          = 0.5 * col;
        b.x1          = 0.5 * (col + 1);
        b.y0          = static_cast<double>(row) / rows;
        b.y1          = static_cast<double>(row + 1) / rows;
        b.label       = tokens.tokens[nouns[k]];
        b.token_index = nouns[k];
        out.layout.boxes.push_back(b);
    }
    out.layout.validate(tokens.size());
    return out;
}

std::string extract_json_array(const std::string& text) {
    for (auto open = text.find('['); open != std::string::npos; open = text.find('[', open + 1)) {
        const auto close = match_bracket(text, open);
        if (close == std::string::npos) {
            break;
        }
        const std::string candidate = text.substr(open, close - open + 1);
        if (json::accept(candidate)) {
            return candidate;
        }
    }
    throw ParseError("layoutgen", "no JSON array found in LLM reply", text);
}

GeneratedLayout layout_from_reply(const std::string& reply, const TokenSequence& tokens) {
    GeneratedLayout out;
    out.raw_response = reply;
    Layout parsed;
    try {
        parsed = layout_from_json(json::parse(extract_json_array(reply)));
    } catch (const ConfigError& e) {
        throw ParseError("layoutgen", std::string("LLM layout does not match the schema: ") + e.what(), reply);
    }
    for (auto& b : parsed.boxes) {
        const int j = tokens.find(b.label);
        if (j <= 0) {
            out.warnings.push_back("box '" + b.label + "' names no prompt token, dropped");
            continue;
        }
        b             = normalize_box(b, out.warnings);
        b.token_index = j;
        out.layout.boxes.push_back(b);
    }
    if (out.layout.boxes.empty()) {
        throw ParseError("layoutgen", "LLM layout has no box bound to a prompt token", reply);
    }
    out.layout.validate(tokens.size());
    return out;
}

std::string chat_completion(const LlmEndpointConfig& endpoint, const std::string& message) {
    endpoint.validate();
    const Endpoint ep = split_url(endpoint.base_url);
    httplib::Client client(ep.origin);
    const auto timeout = std::chrono::duration<double>(endpoint.timeout_s);
    client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
    client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
    client.set_write_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));

    httplib::Headers headers;
    if (const char* key = std::getenv(endpoint.api_key_env.c_str()); key != nullptr && *key != '\0') {
        headers.emplace("Authorization", std::string("Bearer ") + key);
    }
    const json body = {{"model", endpoint.model},
                       {"temperature", 0},
                       {"messages", json::array({{{"role", "user"}, {"content", message}}})}};
    const std::string payload = body.dump();

    std::string last_error;
    for (int attempt = 0; attempt <= endpoint.max_retries; ++attempt) {
        if (attempt > 0) {
            std::this_thread::sleep_for(std::chrono::milliseconds(200 << std::min(attempt - 1, 5)));
        }
        auto res = client.Post(ep.path + "/chat/completions", headers, payload, "application/json");
        if (!res) {
            last_error = "request failed: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status == 429 || res->status >= 500) {
            last_error = "HTTP " + std::to_string(res->status);
            continue;
        }
        if (res->status != 200) {
            throw NetworkError("layoutgen", "LLM endpoint returned HTTP " + std::to_string(res->status) + ": " +
                                                res->body.substr(0, 512));
        }
        try {
            return json::parse(res->body).at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const json::exception& e) {
            throw ParseError("layoutgen", std::string("unexpected chat-completion reply: ") + e.what(), res->body);
        }
    }
    throw NetworkError("layoutgen", "LLM endpoint unreachable after " + std::to_string(endpoint.max_retries + 1) +
                                        " attempt(s): " + last_error);
}

GeneratedLayout generate_layout(const std::string& prompt, LayoutBackend backend, const LlmEndpointConfig& endpoint) {
    if (backend == LayoutBackend::stub) {
        return stub_layout(prompt);
    }
    const PromptTemplate tpl = PromptTemplate::load(
        endpoint.template_path.empty() ? default_template_path() : std::filesystem::path(endpoint.template_path));
    const std::string reply = chat_completion(endpoint, render_template(tpl, prompt));
    return layout_from_reply(reply, TokenSequence::from_prompt(prompt));
}

}  // namespace realcompo
