#include "dist/knowledge.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

namespace dist::knowledge {

using nlohmann::json;

std::string_view to_string(PromptKind kind) {
  return kind == PromptKind::Spatial ? "spatial" : "temporal";
}

std::string build_spatial_prompt(std::string_view label, int count) {
  if (count < 1) throw ConfigError("spatial attribute count must be >= 1");
  std::string s = "Given action label {";
  s += label;
  s += "}, please generate {" + std::to_string(count) + "} most related objects for each class.";
  return s;
}

std::string build_temporal_prompt(std::string_view label, int count) {
  if (count < 1) throw ConfigError("temporal attribute count must be >= 1");
  std::string s = "Given action label {";
  s += label;
  s += "}, please describe {" + std::to_string(count) +
       "} states of each action in simple and short words.";
  return s;
}

namespace {

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::string strip_marker(std::string item) {
  // "1." / "12)" / "3:" numbering
  std::size_t i = 0;
  while (i < item.size() && std::isdigit(static_cast<unsigned char>(item[i]))) ++i;
  if (i > 0 && i < item.size() && (item[i] == '.' || item[i] == ')' || item[i] == ':'))
    return trim(std::string_view(item).substr(i + 1));
  if (!item.empty() && (item[0] == '-' || item[0] == '*'))
    return trim(std::string_view(item).substr(1));
  if (item.rfind("\xE2\x80\xA2", 0) == 0) return trim(std::string_view(item).substr(3));  // bullet
  return item;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::vector<std::string> dedupe_case_insensitive(const std::vector<std::string>& items) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& it : items)
    if (seen.insert(lower(it)).second) out.push_back(it);
  return out;
}

std::string call_with_backoff(LlmClient& client, const PromptRequest& req,
                              const GenerationOptions& opts) {
  auto delay = opts.backoff;
  for (int attempt = 1;; ++attempt) {
    try {
      return client.complete(req);
    } catch (const TransportError&) {
      if (attempt >= std::max(1, opts.transport_attempts)) throw;
      std::this_thread::sleep_for(delay);
      delay *= 2;
    }
  }
}

std::vector<std::string> request_items(LlmClient& client, std::string_view label, PromptKind kind,
                                       int count, const GenerationOptions& opts) {
  PromptRequest req;
  req.label = std::string(label);
  req.kind = kind;
  req.count = count;
  req.prompt = kind == PromptKind::Spatial ? build_spatial_prompt(label, count)
                                           : build_temporal_prompt(label, count);
  std::string raw;
  std::size_t got = 0;
  for (int attempt = 0; attempt <= std::max(0, opts.max_retries); ++attempt) {
    raw = call_with_backoff(client, req, opts);
    std::vector<std::string> items = parse_items(raw);
    if (kind == PromptKind::Spatial) items = dedupe_case_insensitive(items);
    got = items.size();
    if (static_cast<int>(got) == count) return items;
  }
  throw CountMismatch("label '" + std::string(label) + "': expected " + std::to_string(count) + " " +
                          std::string(to_string(kind)) + " attributes, got " + std::to_string(got) +
                          " after " + std::to_string(opts.max_retries + 1) +
                          " attempts; raw response: " + raw,
                      raw);
}

}  // namespace

std::vector<std::string> parse_items(std::string_view response) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    std::string item = strip_marker(trim(current));
    if (!item.empty()) out.push_back(std::move(item));
    current.clear();
  };
  for (char c : response) {
    if (c == ';' || c == '\n' || c == '\r') {
      flush();
    } else {
      current.push_back(c);
    }
  }
  flush();
  return out;
}

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void KnowledgeEntry::validate(int g, int l) const {
  if (label.empty()) throw SchemaError("knowledge entry with empty label");
  if (static_cast<int>(spatial.size()) != g)
    throw SchemaError("entry '" + label + "' has " + std::to_string(spatial.size()) +
                      " spatial attributes, expected " + std::to_string(g));
  if (static_cast<int>(temporal.size()) != l)
    throw SchemaError("entry '" + label + "' has " + std::to_string(temporal.size()) +
                      " temporal attributes, expected " + std::to_string(l));
  for (const auto& s : spatial)
    if (s.empty()) throw SchemaError("entry '" + label + "' has an empty spatial attribute");
  for (const auto& s : temporal)
    if (s.empty()) throw SchemaError("entry '" + label + "' has an empty temporal attribute");
}

KnowledgeEntry generate_attributes(LlmClient& client, std::string_view label,
                                   const GenerationOptions& opts) {
  if (label.empty()) throw ConfigError("generate_attributes: empty label");
  KnowledgeEntry e;
  e.label = std::string(label);
  e.spatial = request_items(client, label, PromptKind::Spatial, opts.spatial_count, opts);
  e.temporal = request_items(client, label, PromptKind::Temporal, opts.temporal_count, opts);
  e.provenance.model_id = client.model_id();
  e.provenance.prompt_hash = hex64(fnv1a64(build_spatial_prompt(label, opts.spatial_count) + "\n" +
                                           build_temporal_prompt(label, opts.temporal_count)));
  e.provenance.timestamp = utc_timestamp();
  return e;
}

AttributeFeatures encode_entry(const KnowledgeEntry& entry, const encoders::TextEncoder& text) {
  AttributeFeatures f;
  const int c = text.dim();
  f.spatial.resize(static_cast<Eigen::Index>(entry.spatial.size()), c);
  f.temporal.resize(static_cast<Eigen::Index>(entry.temporal.size()), c);
  for (std::size_t i = 0; i < entry.spatial.size(); ++i)
    f.spatial.row(static_cast<Eigen::Index>(i)) = text.encode(entry.spatial[i]);
  for (std::size_t i = 0; i < entry.temporal.size(); ++i)
    f.temporal.row(static_cast<Eigen::Index>(i)) = text.encode(entry.temporal[i]);
  return f;
}

bool Fingerprint::compatible_with(const Fingerprint& expected) const {
  if (spatial_count != expected.spatial_count || temporal_count != expected.temporal_count)
    return false;
  if (spatial_template_version != expected.spatial_template_version ||
      temporal_template_version != expected.temporal_template_version)
    return false;
  return expected.model_id.empty() || expected.model_id == model_id;
}

std::string Fingerprint::describe() const {
  std::ostringstream os;
  os << "G=" << spatial_count << " L=" << temporal_count << " model=" << model_id
     << " templates=" << spatial_template_version << "/" << temporal_template_version;
  return os.str();
}

const KnowledgeEntry& KnowledgeBase::at(const std::string& label) const {
  auto it = entries.find(label);
  if (it == entries.end()) throw KnowledgeMiss("knowledge base has no entry for '" + label + "'");
  return it->second;
}

std::vector<std::string> KnowledgeBase::missing(const std::vector<std::string>& labels) const {
  std::vector<std::string> out;
  for (const auto& l : labels)
    if (!contains(l)) out.push_back(l);
  return out;
}

void KnowledgeBase::validate() const {
  for (const auto& [label, e] : entries) {
    if (label != e.label) throw SchemaError("entry key '" + label + "' differs from its label");
    e.validate(fingerprint.spatial_count, fingerprint.temporal_count);
  }
}

std::string to_json_text(const KnowledgeBase& kb) {
  json doc;
  doc["fingerprint"] = {{"G", kb.fingerprint.spatial_count},
                        {"L", kb.fingerprint.temporal_count},
                        {"model_id", kb.fingerprint.model_id},
                        {"spatial_template_version", kb.fingerprint.spatial_template_version},
                        {"temporal_template_version", kb.fingerprint.temporal_template_version}};
  json entries = json::object();
  for (const auto& [label, e] : kb.entries) {
    entries[label] = {{"spatial", e.spatial},
                      {"temporal", e.temporal},
                      {"provenance",
                       {{"model_id", e.provenance.model_id},
                        {"prompt_hash", e.provenance.prompt_hash},
                        {"timestamp", e.provenance.timestamp}}}};
  }
  doc["entries"] = std::move(entries);
  return doc.dump(2) + "\n";
}

KnowledgeBase from_json_text(std::string_view text) {
  KnowledgeBase kb;
  try {
    const json doc = json::parse(text);
    const json& fp = doc.at("fingerprint");
    kb.fingerprint.spatial_count = fp.at("G").get<int>();
    kb.fingerprint.temporal_count = fp.at("L").get<int>();
    kb.fingerprint.model_id = fp.at("model_id").get<std::string>();
    kb.fingerprint.spatial_template_version = fp.at("spatial_template_version").get<int>();
    kb.fingerprint.temporal_template_version = fp.at("temporal_template_version").get<int>();
    for (const auto& [label, e] : doc.at("entries").items()) {
      KnowledgeEntry entry;
      entry.label = label;
      entry.spatial = e.at("spatial").get<std::vector<std::string>>();
      entry.temporal = e.at("temporal").get<std::vector<std::string>>();
      const json& p = e.at("provenance");
      entry.provenance.model_id = p.at("model_id").get<std::string>();
      entry.provenance.prompt_hash = p.at("prompt_hash").get<std::string>();
      entry.provenance.timestamp = p.at("timestamp").get<std::string>();
      kb.entries.emplace(label, std::move(entry));
    }
  } catch (const json::exception& ex) {
    throw SchemaError(std::string("knowledge base schema violation: ") + ex.what());
  }
  kb.validate();
  return kb;
}

namespace {

std::mutex& kb_write_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace

void save_kb(const KnowledgeBase& kb, const std::filesystem::path& path) {
  kb.validate();
  const std::string text = to_json_text(kb);
  std::lock_guard lock(kb_write_mutex());
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp." + hex64(fnv1a64(text) ^ static_cast<std::uint64_t>(
                                               std::hash<std::thread::id>{}(std::this_thread::get_id())));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << text;
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

KnowledgeBase load_kb(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("knowledge base not found: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

KnowledgeBase load_kb(const std::filesystem::path& path, const Fingerprint& expected,
                      bool allow_mismatch) {
  KnowledgeBase kb = load_kb(path);
  if (!allow_mismatch && !kb.fingerprint.compatible_with(expected))
    throw FingerprintMismatch("knowledge base " + path.string() + " has fingerprint [" +
                              kb.fingerprint.describe() + "], run expects [" + expected.describe() +
                              "]");
  return kb;
}

BuildReport build_knowledge(KnowledgeBase& kb, LlmClient& client,
                            const std::vector<std::string>& labels, const BuildOptions& opts) {
  BuildReport report;
  std::vector<std::string> todo;
  std::set<std::string> seen;
  for (const auto& l : labels) {
    if (!seen.insert(l).second) continue;
    if (kb.contains(l)) {
      report.cached.push_back(l);
    } else {
      todo.push_back(l);
    }
  }
  const std::size_t calls_before = client.calls();
  std::mutex mu;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= todo.size()) return;
      const std::string& label = todo[i];
      try {
        KnowledgeEntry e = generate_attributes(client, label, opts.generation);
        std::lock_guard lock(mu);
        kb.entries[label] = std::move(e);
        report.generated.push_back(label);
      } catch (const std::exception& ex) {
        std::lock_guard lock(mu);
        report.failures[label] = ex.what();
      }
    }
  };
  const int workers = std::max(1, std::min<int>(opts.max_inflight, static_cast<int>(todo.size())));
  if (!todo.empty()) {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  std::sort(report.generated.begin(), report.generated.end());
  report.client_calls = client.calls() - calls_before;
  return report;
}

// FixtureClient

std::unique_ptr<FixtureClient> FixtureClient::from_json_text(std::string_view text) {
  std::unique_ptr<FixtureClient> c(new FixtureClient());
  try {
    const json doc = json::parse(text);
    for (const auto& [label, kinds] : doc.items()) {
      for (PromptKind kind : {PromptKind::Spatial, PromptKind::Temporal}) {
        const std::string key(to_string(kind));
        if (!kinds.contains(key)) continue;
        const json& v = kinds.at(key);
        std::vector<std::string> responses;
        if (v.is_array()) {
          responses = v.get<std::vector<std::string>>();
        } else {
          responses.push_back(v.get<std::string>());
        }
        if (!responses.empty()) c->responses_[{label, kind}] = std::move(responses);
      }
    }
  } catch (const json::exception& ex) {
    throw SchemaError(std::string("fixture schema violation: ") + ex.what());
  }
  return c;
}

std::unique_ptr<FixtureClient> FixtureClient::from_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("fixture file not found: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

std::string FixtureClient::complete(const PromptRequest& request) {
  ++calls_;
  std::lock_guard lock(mutex_);
  auto it = responses_.find({request.label, request.kind});
  if (it == responses_.end())
    throw KnowledgeMiss("fixture has no " + std::string(to_string(request.kind)) +
                        " response for label '" + request.label + "'");
  std::size_t& n = served_[{request.label, request.kind}];
  const std::string& out = it->second[std::min(n, it->second.size() - 1)];
  ++n;
  return out;
}

}  // namespace dist::knowledge
