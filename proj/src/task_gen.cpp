#include "pflow/task_gen.hpp"

#include "pflow/artifacts.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace pflow::tasks {

namespace {

bool is_digit_token(std::string_view t) { return t.size() == 1 && std::isdigit(static_cast<unsigned char>(t[0])); }

constexpr std::string_view kNames[] = {"Tom", "Ann", "Sam", "Mia"};

enum class Op { add, sub, mul };

std::string_view op_word(Op op) {
  switch (op) {
    case Op::add: return "gets";
    case Op::sub: return "loses";
    case Op::mul: return "times";
  }
  return "";
}

std::string_view op_symbol(Op op) {
  switch (op) {
    case Op::add: return "+";
    case Op::sub: return "-";
    case Op::mul: return "*";
  }
  return "";
}

long apply(Op op, long a, long b) {
  switch (op) {
    case Op::add: return a + b;
    case Op::sub: return a - b;
    case Op::mul: return a * b;
  }
  return 0;
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {}

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary vocab([] {
    std::vector<std::string> t{"<pad>", "<bos>", "<eos>"};
    for (char c = '0'; c <= '9'; ++c) t.emplace_back(1, c);
    for (const char* s : {"+", "-", "*", "=", ";", "####", "Q:", "A:", "has", "gets", "loses", "times", ",", ".",
                          "how", "many", "?"})
      t.emplace_back(s);
    for (auto n : kNames) t.emplace_back(n);
    return t;
  }());
  return vocab;
}

TokenId Vocabulary::id(std::string_view token) const {
  const auto it = std::find(tokens_.begin(), tokens_.end(), token);
  if (it == tokens_.end()) throw std::invalid_argument("unknown token '" + std::string(token) + "'");
  return static_cast<TokenId>(it - tokens_.begin());
}

std::string_view Vocabulary::text(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocabulary::tokenize(std::string_view text) const {
  std::vector<TokenId> out;
  std::istringstream is{std::string(text)};
  std::string word;
  while (is >> word) {
    if (std::all_of(word.begin(), word.end(), [](unsigned char c) { return std::isdigit(c); })) {
      for (char c : word) out.push_back(id(std::string_view(&c, 1)));
    } else {
      out.push_back(id(word));
    }
  }
  return out;
}

std::string Vocabulary::detokenize(std::span<const TokenId> tokens) const {
  std::string out;
  bool prev_digit = false;
  for (auto t : tokens) {
    const auto s = text(t);
    const bool digit = is_digit_token(s);
    if (!out.empty() && !(digit && prev_digit)) out += ' ';
    out += s;
    prev_digit = digit;
  }
  return out;
}

std::vector<TokenId> Vocabulary::number(long value) const {
  return tokenize(std::to_string(value));
}

// ---------------------------------------------------------------------------

void CorpusSpec::validate() const {
  if (min_steps < 1 || max_steps < min_steps) throw std::invalid_argument("CorpusSpec: bad steps range");
  if (min_operand < 0 || max_operand < min_operand) throw std::invalid_argument("CorpusSpec: bad operand range");
  if (max_value < max_operand) throw std::invalid_argument("CorpusSpec: max_value below max_operand");
}

void to_json(nlohmann::json& j, const CorpusSpec& s) {
  j = nlohmann::json{{"seed", s.seed},           {"n_train", s.n_train},         {"n_eval", s.n_eval},
                     {"min_steps", s.min_steps}, {"max_steps", s.max_steps},     {"min_operand", s.min_operand},
                     {"max_operand", s.max_operand}, {"max_value", s.max_value}, {"max_tokens", s.max_tokens}};
}

void from_json(const nlohmann::json& j, CorpusSpec& s) {
  s.seed = j.value("seed", s.seed);
  s.n_train = j.value("n_train", s.n_train);
  s.n_eval = j.value("n_eval", s.n_eval);
  s.min_steps = j.value("min_steps", s.min_steps);
  s.max_steps = j.value("max_steps", s.max_steps);
  s.min_operand = j.value("min_operand", s.min_operand);
  s.max_operand = j.value("max_operand", s.max_operand);
  s.max_value = j.value("max_value", s.max_value);
  s.max_tokens = j.value("max_tokens", s.max_tokens);
}

std::vector<TokenId> TaskInstance::full_sequence() const {
  std::vector<TokenId> seq = question;
  seq.insert(seq.end(), rationale.begin(), rationale.end());
  return seq;
}

Corpus generate(const CorpusSpec& spec) {
  spec.validate();
  const auto& vocab = Vocabulary::standard();
  std::mt19937_64 rng(spec.seed);
  const auto uniform = [&rng](long lo, long hi) { return std::uniform_int_distribution<long>(lo, hi)(rng); };

  Corpus corpus;
  std::unordered_set<std::string> seen;
  const std::size_t wanted = spec.n_train + spec.n_eval;
  const std::size_t max_attempts = 200 * wanted + 1000;
  std::size_t attempts = 0;
  while (corpus.train.size() + corpus.eval.size() < wanted) {
    if (++attempts > max_attempts)
      throw std::invalid_argument("generate: operand/step ranges admit too few distinct problems for " +
                                  std::to_string(wanted) + " instances");
    const auto steps = static_cast<std::size_t>(uniform(static_cast<long>(spec.min_steps), static_cast<long>(spec.max_steps)));
    const auto name = kNames[static_cast<std::size_t>(uniform(0, std::size(kNames) - 1))];
    long value = uniform(spec.min_operand, spec.max_operand);

    std::string question = "<bos> Q: " + std::string(name) + " has " + std::to_string(value);
    std::string rationale;
    for (std::size_t s = 0; s < steps; ++s) {
      // Pick an operation whose result stays inside [0, max_value].
      Op op{};
      long operand = 0;
      for (int tries = 0;; ++tries) {
        op = static_cast<Op>(uniform(0, 2));
        operand = uniform(spec.min_operand, spec.max_operand);
        const long r = apply(op, value, operand);
        if (r >= 0 && r <= spec.max_value) break;
        if (tries > 64) {
          op = Op::sub;
          operand = std::min(value, spec.min_operand);
          break;
        }
      }
      const long next = apply(op, value, operand);
      question += " , " + std::string(op_word(op)) + " " + std::to_string(operand);
      rationale += std::to_string(value) + " " + std::string(op_symbol(op)) + " " + std::to_string(operand) + " = " +
                   std::to_string(next) + " ; ";
      value = next;
    }
    question += " . how many ? A:";
    rationale += "#### " + std::to_string(value) + " <eos>";

    if (!seen.insert(question).second) continue;
    TaskInstance inst;
    inst.question = vocab.tokenize(question);
    inst.rationale = vocab.tokenize(rationale);
    inst.answer = std::to_string(value);
    if (inst.token_count() > spec.max_tokens)
      throw std::invalid_argument("generate: instance of " + std::to_string(inst.token_count()) +
                                  " tokens exceeds max_tokens " + std::to_string(spec.max_tokens));
    // Questions are unique across the whole corpus, so train and eval are disjoint.
    if (corpus.train.size() < spec.n_train) {
      inst.id = "train-" + std::to_string(corpus.train.size());
      corpus.train.push_back(std::move(inst));
    } else {
      inst.id = "eval-" + std::to_string(corpus.eval.size());
      corpus.eval.push_back(std::move(inst));
    }
  }
  return corpus;
}

TaskInstance without_answer_terminator(const TaskInstance& instance) {
  const auto& vocab = Vocabulary::standard();
  TaskInstance out = instance;
  const auto delim = std::find(out.rationale.begin(), out.rationale.end(), vocab.answer_delimiter());
  if (delim == out.rationale.end()) return out;
  // Drop the "; ####" separator and the answer digits, keep <eos>.
  auto cut = delim;
  if (cut != out.rationale.begin() && *(cut - 1) == vocab.id(";")) --cut;
  out.rationale.erase(cut, out.rationale.end());
  out.rationale.push_back(vocab.eos());
  return out;
}

std::string canonical_answer(std::string_view answer) {
  std::string s;
  for (char c : answer)
    if (!std::isspace(static_cast<unsigned char>(c))) s += c;
  std::string sign;
  if (!s.empty() && (s[0] == '-' || s[0] == '+')) {
    if (s[0] == '-') sign = "-";
    s.erase(0, 1);
  }
  const auto first = s.find_first_not_of('0');
  if (first == std::string::npos) return s.empty() ? sign : "0";
  s = s.substr(first);
  return sign + s;
}

bool score(const std::optional<std::string>& predicted, std::string_view gold) {
  if (!predicted) return false;
  const auto p = canonical_answer(*predicted);
  return !p.empty() && p == canonical_answer(gold);
}

// ---------------------------------------------------------------------------

void save_corpus(const std::filesystem::path& path, std::span<const TaskInstance> instances,
                 const nlohmann::json& header) {
  const auto& vocab = Vocabulary::standard();
  std::ostringstream os;
  os << nlohmann::json{{"header", header}}.dump() << '\n';
  for (const auto& inst : instances) {
    os << nlohmann::json{{"id", inst.id},
                         {"question", vocab.detokenize(inst.question)},
                         {"rationale", vocab.detokenize(inst.rationale)},
                         {"answer", inst.answer}}
              .dump()
       << '\n';
  }
  write_text_atomically(path, os.str());
}

std::vector<TaskInstance> load_corpus(const std::filesystem::path& path) {
  const auto& vocab = Vocabulary::standard();
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open corpus " + path.string());
  std::vector<TaskInstance> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto rec = nlohmann::json::parse(line);
    if (rec.contains("header")) continue;
    try {
      TaskInstance inst;
      inst.id = rec.at("id").get<std::string>();
      inst.question = vocab.tokenize(rec.at("question").get<std::string>());
      inst.rationale = vocab.tokenize(rec.value("rationale", std::string{}));
      inst.answer = rec.at("answer").get<std::string>();
      out.push_back(std::move(inst));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace pflow::tasks
