// Synthetic dataset generators with fixed counterfactual mappings.
// Prompts are plain space-separated word sequences over a closed vocabulary,
// so word-level tokenization round-trips exactly.
#pragma once

#include <algorithm>
#include <array>
#include <map>
#include <optional>
#include <set>
#include <fstream>
#include <sstream>
#include <tuple>
#include <string>
#include <vector>

#include <json.hpp>

#include "cbench/rng.hpp"
#include "cbench/tensor.hpp"

namespace cbench {

enum class Task { Ioi, ArithPlus, ArithMinus, Mcqa };
enum class Split { Train, Validation, TestPublic, TestPrivate };

inline const char* task_name(Task t) {
    switch (t) {
        case Task::Ioi: return "ioi";
        case Task::ArithPlus: return "arith_plus";
        case Task::ArithMinus: return "arith_minus";
        case Task::Mcqa: return "mcqa";
    }
    return "?";
}

inline Task task_from_name(const std::string& s) {
    if (s == "ioi") return Task::Ioi;
    if (s == "arith_plus") return Task::ArithPlus;
    if (s == "arith_minus") return Task::ArithMinus;
    if (s == "mcqa") return Task::Mcqa;
    throw Error("unknown task '" + s + "'");
}

inline const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Validation: return "validation";
        case Split::TestPublic: return "test_public";
        case Split::TestPrivate: return "test_private";
    }
    return "?";
}

inline Split split_from_name(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "validation") return Split::Validation;
    if (s == "test_public") return Split::TestPublic;
    if (s == "test_private") return Split::TestPrivate;
    throw Error("unknown split '" + s + "'");
}

inline int split_index(Split s) { return static_cast<int>(s); }

struct CfVariant {
    std::string prompt;
    std::vector<std::string> choices;
    int answer_key = -1;
};

struct TaskInstance {
    std::string prompt;
    int template_id = 0;
    std::map<std::string, std::string> metadata;
    std::vector<std::string> choices;
    int answer_key = -1;
    std::map<std::string, CfVariant> counterfactuals;

    std::string answer() const {
        if (answer_key < 0) throw Error("instance has no defined answer");
        return choices[static_cast<size_t>(answer_key)];
    }

    const CfVariant& cf(const std::string& name) const {
        auto it = counterfactuals.find(name);
        if (it == counterfactuals.end())
            throw Error("missing counterfactual '" + name + "'");
        return it->second;
    }

    bool operator==(const TaskInstance& o) const {
        auto key = [](const TaskInstance& t) {
            return std::tie(t.prompt, t.template_id, t.metadata, t.choices,
                            t.answer_key);
        };
        if (key(*this) != key(o)) return false;
        if (counterfactuals.size() != o.counterfactuals.size()) return false;
        for (const auto& [name, v] : counterfactuals) {
            auto it = o.counterfactuals.find(name);
            if (it == o.counterfactuals.end()) return false;
            if (v.prompt != it->second.prompt ||
                v.choices != it->second.choices ||
                v.answer_key != it->second.answer_key)
                return false;
        }
        return true;
    }
};

// ---------------------------------------------------------------------------
// attribute pools, four disjoint groups per attribute (one per split)
// ---------------------------------------------------------------------------

namespace pools {

inline const std::vector<std::string>& names() {
    static const std::vector<std::string> v{
        "Nick",  "John",  "Max",   "Fred",   "Bob",    "Alice",    // train
        "Mary",  "Tom",   "Sarah", "David",  "Emma",   "Peter",    // validation
        "Laura", "James", "Kate",  "Oliver", "Sophie", "Henry",    // test_public
        "Ruth",  "Carl",  "Nina",  "Victor", "Iris",   "Walter"};  // test_private
    return v;
}

inline const std::vector<std::string>& objects() {
    static const std::vector<std::string> v{
        "nail", "apple",  "book",                      // train
        "ring", "bottle", "pencil",                    // validation
        "coin", "ticket", "hammer",                    // test_public
        "glove", "candle", "basket"};                  // test_private
    return v;
}

inline const std::vector<std::string>& places() {
    static const std::vector<std::string> v{
        "store",  "park",    "school",                 // train
        "market", "station", "library",                // validation
        "office", "garden",  "harbor",                 // test_public
        "museum", "bakery",  "theater"};               // test_private
    return v;
}

inline const std::vector<std::string>& nouns() {
    static const std::vector<std::string> v{
        "salmon meat", "banana",   "coal",             // train
        "snow",        "grass",    "pumpkin",          // validation
        "coconut",     "lemon",    "brick",            // test_public
        "chalk",       "lavender", "rust"};            // test_private
    return v;
}

inline const std::vector<std::string>& colors() {
    // shared across splits, matching the 11-color sampling scheme
    static const std::vector<std::string> v{
        "gray", "black", "white",  "pink",  "yellow", "brown",
        "red",  "blue",  "green", "orange", "purple"};
    return v;
}

inline std::vector<std::string> slice_for_split(
    const std::vector<std::string>& pool, Split split) {
    size_t per = pool.size() / 4;
    size_t off = static_cast<size_t>(split_index(split)) * per;
    return {pool.begin() + static_cast<long>(off),
            pool.begin() + static_cast<long>(off + per)};
}

}  // namespace pools

inline std::vector<std::string> sample_distinct(
    const std::vector<std::string>& pool, size_t k, Rng& rng) {
    if (k > pool.size())
        throw Error("attribute pool exhausted: need " + std::to_string(k) +
                    " from " + std::to_string(pool.size()));
    std::vector<std::string> bag = pool;
    rng.shuffle(bag);
    bag.resize(k);
    return bag;
}

// ---------------------------------------------------------------------------
// prompt assembly helpers
// ---------------------------------------------------------------------------

inline std::vector<std::string> split_words(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
}

inline std::string join_words(const std::vector<std::string>& words) {
    std::string out;
    for (size_t i = 0; i < words.size(); ++i) {
        if (i) out += " ";
        out += words[i];
    }
    return out;
}

inline std::string capitalized(std::string s) {
    if (!s.empty() && s[0] >= 'a' && s[0] <= 'z')
        s[0] = static_cast<char>(s[0] - 'a' + 'A');
    return s;
}

// ---------------------------------------------------------------------------
// IOI
// ---------------------------------------------------------------------------

namespace ioi {

struct Template {
    // first clause mentions {A} and {B} plus a place; main clause has {C}
    std::string opener;   // e.g. "After"
    std::string middle;   // between "{A} and {B}" and "the {place},"
    std::string verb;     // main clause verb
};

inline const std::vector<Template>& templates() {
    static const std::vector<Template> v{
        {"After", "spent some time at", "offered"},
        {"When", "went to", "gave"},
        {"While", "were at", "handed"},
        {"After", "walked to", "passed"},
        {"When", "arrived at", "showed"},
        {"While", "stayed near", "sold"},
    };
    return v;
}

inline std::string render(const Template& t, const std::string& a,
                          const std::string& b, const std::string& c,
                          const std::string& place, const std::string& object) {
    return t.opener + " " + a + " and " + b + " " + t.middle + " the " + place +
           " , " + c + " " + t.verb + " a " + object + " to";
}

struct NameTriple {
    std::string a, b, c;
};

inline NameTriple apply_random_names(const NameTriple& t, const std::string& ra,
                                     const std::string& rb) {
    return {ra, rb, t.c == t.a ? ra : rb};
}
inline NameTriple apply_s1_flip(const NameTriple& t) { return {t.b, t.a, t.c}; }
inline NameTriple apply_s2_flip(const NameTriple& t) {
    return {t.a, t.b, t.c == t.a ? t.b : t.a};
}

inline std::string io_of(const NameTriple& t) { return t.c == t.a ? t.b : t.a; }

// Names are fixed per instance; every counterfactual derives from them.
inline TaskInstance make_instance(int template_id, const std::string& a,
                                  const std::string& b, bool subject_first,
                                  const std::string& place,
                                  const std::string& object,
                                  const std::string& ra, const std::string& rb,
                                  const std::string& rc) {
    const Template& tpl = templates()[static_cast<size_t>(template_id)];
    NameTriple base{a, b, subject_first ? a : b};

    TaskInstance inst;
    inst.template_id = template_id;
    inst.prompt = render(tpl, base.a, base.b, base.c, place, object);
    inst.choices = {base.a, base.b};
    inst.answer_key = io_of(base) == base.a ? 0 : 1;
    inst.metadata["subject"] = base.c;
    inst.metadata["indirect_object"] = io_of(base);
    inst.metadata["object"] = object;
    inst.metadata["place"] = place;
    inst.metadata["random_a"] = ra;
    inst.metadata["random_b"] = rb;
    inst.metadata["random_c"] = rc;

    auto add_cf = [&](const std::string& name, const NameTriple& nt) {
        CfVariant v;
        v.prompt = render(tpl, nt.a, nt.b, nt.c, place, object);
        v.choices = {nt.a, nt.b};
        v.answer_key = io_of(nt) == nt.a ? 0 : 1;
        inst.counterfactuals[name] = std::move(v);
    };

    CfVariant abc;
    abc.prompt = render(tpl, base.a, base.b, rc, place, object);
    abc.choices = {base.a, base.b, rc};
    abc.answer_key = -1;
    inst.counterfactuals["abc"] = std::move(abc);

    NameTriple rn = apply_random_names(base, ra, rb);
    add_cf("random_names", rn);
    add_cf("io_s1_flip", apply_s1_flip(base));
    add_cf("io_s2_flip", apply_s2_flip(base));
    add_cf("random_names_io_s1_flip", apply_s1_flip(rn));
    add_cf("random_names_io_s2_flip", apply_s2_flip(rn));
    add_cf("io_s1_flip_io_s2_flip", apply_s2_flip(apply_s1_flip(base)));
    add_cf("random_names_io_s1_flip_io_s2_flip",
           apply_s2_flip(apply_s1_flip(rn)));
    return inst;
}

}  // namespace ioi

inline std::vector<TaskInstance> gen_ioi(size_t n, uint64_t seed, Split split) {
    if (n < 1) throw Error("gen_ioi: n must be >= 1");
    Rng rng = Rng::child(seed, std::string("ioi/") + split_name(split));
    auto names = pools::slice_for_split(pools::names(), split);
    auto objects = pools::slice_for_split(pools::objects(), split);
    auto places = pools::slice_for_split(pools::places(), split);
    std::vector<TaskInstance> out;
    out.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        auto picked = sample_distinct(names, 5, rng);
        int tpl = static_cast<int>(rng.index(ioi::templates().size()));
        bool subject_first = rng.uniform() < 0.5;
        std::string place = places[rng.index(places.size())];
        std::string object = objects[rng.index(objects.size())];
        out.push_back(ioi::make_instance(tpl, picked[0], picked[1],
                                         subject_first, place, object,
                                         picked[2], picked[3], picked[4]));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Arithmetic
// ---------------------------------------------------------------------------

namespace arith {

inline std::string render(int template_id, bool plus, int x, int y) {
    std::string xs = std::to_string(x), ys = std::to_string(y);
    switch (template_id) {
        case 0:
            return plus ? "The sum of " + xs + " and " + ys + " is:"
                        : "The difference between " + xs + " and " + ys + " is:";
        case 1:
            return "Q: How much is " + xs + (plus ? " plus " : " minus ") + ys +
                   " ? A:";
        case 2:
            return "Q: What is " + xs + (plus ? " plus " : " minus ") + ys +
                   " ? A:";
        case 3:
            return xs + (plus ? " + " : " - ") + ys + " =";
        default:
            throw Error("arith: bad template id");
    }
}

constexpr int kNumTemplates = 4;

inline int result_of(bool plus, int x, int y) { return plus ? x + y : x - y; }

inline bool ones_carry(bool plus, int x, int y) {
    return plus ? (x % 10 + y % 10) >= 10 : (x % 10) < (y % 10);
}

// For addition this is the presence of a hundreds digit; for subtraction
// (always non-negative here) it is the presence of a tens digit.
inline bool tens_carry(bool plus, int x, int y) {
    return plus ? result_of(plus, x, y) >= 100 : result_of(plus, x, y) >= 10;
}

inline bool valid_pair(bool plus, int x, int y) {
    if (x < 10 || x > 99 || y < 10 || y > 99) return false;
    return plus || x >= y;  // subtraction constrained to non-negative results
}

inline TaskInstance make_instance(bool plus, int x, int y, int template_id,
                                  Rng& rng,
                                  std::optional<int> pair_class = std::nullopt) {
    if (!valid_pair(plus, x, y)) throw Error("arith: invalid operand pair");
    TaskInstance inst;
    inst.template_id = template_id;
    inst.prompt = render(template_id, plus, x, y);
    inst.choices = {std::to_string(result_of(plus, x, y))};
    inst.answer_key = 0;
    inst.metadata["op"] = plus ? "+" : "-";
    inst.metadata["x"] = std::to_string(x);
    inst.metadata["y"] = std::to_string(y);

    auto add_cf = [&](const std::string& name, int cx, int cy) {
        CfVariant v;
        v.prompt = render(template_id, plus, cx, cy);
        v.choices = {std::to_string(result_of(plus, cx, cy))};
        v.answer_key = 0;
        inst.counterfactuals[name] = std::move(v);
    };

    // Rejection-sample a counterfactual satisfying `ok`; deterministic in rng.
    auto sample_cf = [&](const std::string& name, auto propose, auto ok) {
        for (int tries = 0; tries < 400; ++tries) {
            auto [cx, cy] = propose();
            if (valid_pair(plus, cx, cy) && ok(cx, cy)) {
                add_cf(name, cx, cy);
                return;
            }
        }
        throw Error(std::string("arith: cannot satisfy counterfactual '") +
                    name + "' for " + std::to_string(x) +
                    (plus ? "+" : "-") + std::to_string(y));
    };

    auto rand_digit = [&]() { return static_cast<int>(rng.index(10)); };
    auto rand_tens = [&]() { return 1 + static_cast<int>(rng.index(9)); };

    sample_cf(
        "random_operands",
        [&]() {
            int cx = 10 + static_cast<int>(rng.index(90));
            int cy = 10 + static_cast<int>(rng.index(90));
            return std::pair{cx, cy};
        },
        [&](int cx, int cy) {
            if (pair_class && (cx + 97 * cy) % 4 != *pair_class) return false;
            return result_of(plus, cx, cy) != result_of(plus, x, y);
        });
    sample_cf(
        "ones_op1",
        [&]() { return std::pair{(x / 10) * 10 + rand_digit(), y}; },
        [&](int cx, int) { return cx % 10 != x % 10; });
    sample_cf(
        "ones_op2",
        [&]() { return std::pair{x, (y / 10) * 10 + rand_digit()}; },
        [&](int, int cy) { return cy % 10 != y % 10; });
    sample_cf(
        "tens_op1",
        [&]() { return std::pair{rand_tens() * 10 + x % 10, y}; },
        [&](int cx, int) { return cx / 10 != x / 10; });
    sample_cf(
        "tens_op2",
        [&]() { return std::pair{x, rand_tens() * 10 + y % 10}; },
        [&](int, int cy) { return cy / 10 != y / 10; });
    sample_cf(
        "ones_carry",
        [&]() {
            return std::pair{(x / 10) * 10 + rand_digit(),
                             (y / 10) * 10 + rand_digit()};
        },
        [&](int cx, int cy) {
            return ones_carry(plus, cx, cy) != ones_carry(plus, x, y);
        });
    sample_cf(
        "tens_carry",
        [&]() {
            return std::pair{rand_tens() * 10 + x % 10,
                             rand_tens() * 10 + y % 10};
        },
        [&](int cx, int cy) {
            return tens_carry(plus, cx, cy) != tens_carry(plus, x, y) &&
                   ones_carry(plus, cx, cy) == ones_carry(plus, x, y);
        });
    return inst;
}

}  // namespace arith

inline std::vector<TaskInstance> gen_arithmetic(bool plus, size_t n,
                                                uint64_t seed, Split split) {
    if (n < 1) throw Error("gen_arithmetic: n must be >= 1");
    Rng rng = Rng::child(seed, std::string(plus ? "arith+/" : "arith-/") +
                                   split_name(split));
    int cls = split_index(split);
    std::vector<TaskInstance> out;
    out.reserve(n);
    while (out.size() < n) {
        int x = 10 + static_cast<int>(rng.index(90));
        int y = 10 + static_cast<int>(rng.index(90));
        if (!arith::valid_pair(plus, x, y)) continue;
        if ((x + 97 * y) % 4 != cls) continue;  // operand pairs split 4 ways
        int tpl = static_cast<int>(rng.index(arith::kNumTemplates));
        try {
            out.push_back(arith::make_instance(plus, x, y, tpl, rng, cls));
        } catch (const Error&) {
            // a few subtraction pairs (e.g. equal tens digits) admit no
            // borrow-flip counterfactual; skip those base pairs
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// MCQA
// ---------------------------------------------------------------------------

namespace mcqa {

inline std::vector<std::string> standard_symbols(size_t n) {
    std::vector<std::string> out;
    for (size_t i = 0; i < n; ++i)
        out.push_back(std::string(1, static_cast<char>('A' + i)));
    return out;
}

inline std::vector<std::string> number_symbols(size_t n) {
    std::vector<std::string> out;
    for (size_t i = 0; i < n; ++i) out.push_back(std::to_string(i + 1));
    return out;
}

// Letters outside the standard range, like the paper's E/Z/F/L relabeling.
inline std::vector<std::string> random_letters(size_t n, Rng& rng) {
    std::vector<std::string> pool;
    for (char c = 'E'; c <= 'Z'; ++c) pool.push_back(std::string(1, c));
    return sample_distinct(pool, n, rng);
}

inline std::string render(const std::string& noun, const std::string& color,
                          const std::vector<std::string>& symbols,
                          const std::vector<std::string>& option_colors) {
    std::string p = capitalized(noun) + " is " + color + " . What color is " +
                    noun + " ?";
    for (size_t i = 0; i < symbols.size(); ++i)
        p += " " + symbols[i] + ". " + option_colors[i];
    p += " Answer:";
    return p;
}

struct Layout {
    std::string noun, color;
    std::vector<std::string> symbols;
    std::vector<std::string> option_colors;
    int answer_key = 0;
};

inline CfVariant to_variant(const Layout& l) {
    CfVariant v;
    v.prompt = render(l.noun, l.color, l.symbols, l.option_colors);
    v.choices = l.symbols;
    v.answer_key = l.answer_key;
    return v;
}

inline TaskInstance make_instance(const std::string& noun,
                                  const std::string& color,
                                  const std::vector<std::string>& distractors,
                                  size_t answer_pos, size_t swap_pos,
                                  const std::string& alt_noun,
                                  const std::string& alt_color,
                                  const std::vector<std::string>& alt_letters) {
    size_t n_choices = distractors.size() + 1;
    if (answer_pos >= n_choices || swap_pos >= n_choices ||
        swap_pos == answer_pos)
        throw Error("mcqa: bad positions");

    Layout base;
    base.noun = noun;
    base.color = color;
    base.symbols = standard_symbols(n_choices);
    base.option_colors = distractors;
    base.option_colors.insert(
        base.option_colors.begin() + static_cast<long>(answer_pos), color);
    base.answer_key = static_cast<int>(answer_pos);

    TaskInstance inst;
    inst.template_id = 0;
    inst.prompt = render(base.noun, base.color, base.symbols,
                         base.option_colors);
    inst.choices = base.symbols;
    inst.answer_key = base.answer_key;
    inst.metadata["noun"] = noun;
    inst.metadata["color"] = color;
    inst.metadata["answer_position"] = std::to_string(answer_pos);

    auto with_noun = [&](Layout l) {
        l.noun = alt_noun;
        return l;
    };
    auto with_color = [&](Layout l) {
        l.option_colors[static_cast<size_t>(l.answer_key)] = alt_color;
        l.color = alt_color;
        return l;
    };
    auto with_position = [&](Layout l) {
        std::swap(l.option_colors[static_cast<size_t>(l.answer_key)],
                  l.option_colors[swap_pos]);
        l.answer_key = static_cast<int>(swap_pos);
        return l;
    };
    auto with_symbols = [&](Layout l, std::vector<std::string> sym) {
        l.symbols = std::move(sym);
        return l;
    };

    auto& cfs = inst.counterfactuals;
    cfs["noun"] = to_variant(with_noun(base));
    cfs["color"] = to_variant(with_color(base));
    cfs["noun_color"] = to_variant(with_noun(with_color(base)));
    cfs["answer_position"] = to_variant(with_position(base));
    cfs["symbol"] = to_variant(with_symbols(base, number_symbols(n_choices)));
    cfs["random_letter"] = to_variant(with_symbols(base, alt_letters));
    cfs["answer_position_random_letter"] =
        to_variant(with_symbols(with_position(base), alt_letters));
    cfs["answer_position_symbol"] =
        to_variant(with_symbols(with_position(base), number_symbols(n_choices)));
    cfs["answer_position_color"] = to_variant(with_position(with_color(base)));
    return inst;
}

}  // namespace mcqa

inline std::vector<TaskInstance> gen_mcqa(size_t n, size_t n_choices,
                                          uint64_t seed, Split split) {
    if (n < 1) throw Error("gen_mcqa: n must be >= 1");
    if (n_choices < 2 || n_choices > 10)
        throw Error("gen_mcqa: n_choices must be in [2,10]");
    Rng rng = Rng::child(seed, std::string("mcqa/") + split_name(split));
    auto nouns = pools::slice_for_split(pools::nouns(), split);
    const auto& colors = pools::colors();
    if (colors.size() < n_choices + 1)
        throw Error("gen_mcqa: color pool too small");
    if (nouns.size() < 2) throw Error("gen_mcqa: noun pool too small");
    std::vector<TaskInstance> out;
    out.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        auto nn = sample_distinct(nouns, 2, rng);
        auto cc = sample_distinct(colors, n_choices + 1, rng);
        std::string color = cc[0];
        std::string alt_color = cc[1];
        std::vector<std::string> distractors(cc.begin() + 2, cc.end());
        size_t pos = rng.index(n_choices);
        size_t swap = rng.index(n_choices - 1);
        if (swap >= pos) ++swap;
        auto letters = mcqa::random_letters(n_choices, rng);
        out.push_back(mcqa::make_instance(nn[0], color, distractors, pos, swap,
                                          nn[1], alt_color, letters));
    }
    return out;
}

inline std::vector<TaskInstance> generate(Task task, size_t n, uint64_t seed,
                                          Split split, size_t n_choices = 4) {
    switch (task) {
        case Task::Ioi: return gen_ioi(n, seed, split);
        case Task::ArithPlus: return gen_arithmetic(true, n, seed, split);
        case Task::ArithMinus: return gen_arithmetic(false, n, seed, split);
        case Task::Mcqa: return gen_mcqa(n, n_choices, seed, split);
    }
    throw Error("generate: bad task");
}

// Training mixture for the toy model itself: instances drawn from every
// split's attribute pools, standing in for a pretraining corpus. The four
// benchmark splits keep their disjoint pools for method evaluation.
inline std::vector<TaskInstance> gen_pretrain(Task task, size_t n,
                                              uint64_t seed,
                                              size_t n_choices = 4) {
    std::vector<std::vector<TaskInstance>> parts;
    for (Split s : {Split::Train, Split::Validation, Split::TestPublic,
                    Split::TestPrivate})
        parts.push_back(generate(task, (n + 3) / 4, seed + 1000, s, n_choices));
    std::vector<TaskInstance> out;
    for (size_t i = 0; out.size() < n; ++i)
        out.push_back(parts[i % 4][i / 4]);
    return out;
}

inline const std::vector<std::string>& counterfactual_names(Task task) {
    static const std::vector<std::string> ioi_names{
        "abc",
        "random_names",
        "io_s1_flip",
        "io_s2_flip",
        "random_names_io_s1_flip",
        "random_names_io_s2_flip",
        "io_s1_flip_io_s2_flip",
        "random_names_io_s1_flip_io_s2_flip"};
    static const std::vector<std::string> arith_names{
        "random_operands", "ones_op1", "ones_op2", "tens_op1",
        "tens_op2",        "ones_carry", "tens_carry"};
    static const std::vector<std::string> mcqa_names{
        "noun",
        "color",
        "noun_color",
        "answer_position",
        "symbol",
        "random_letter",
        "answer_position_random_letter",
        "answer_position_symbol",
        "answer_position_color"};
    switch (task) {
        case Task::Ioi: return ioi_names;
        case Task::ArithPlus:
        case Task::ArithMinus: return arith_names;
        case Task::Mcqa: return mcqa_names;
    }
    throw Error("counterfactual_names: bad task");
}

// The counterfactual used for circuit-level ablations on each task.
inline std::string circuit_counterfactual(Task task) {
    switch (task) {
        case Task::Ioi: return "abc";
        case Task::ArithPlus:
        case Task::ArithMinus: return "random_operands";
        case Task::Mcqa: return "answer_position";
    }
    throw Error("circuit_counterfactual: bad task");
}

// Re-derives the expected answer from metadata; used as an integrity oracle.
inline void verify_instance(Task task, const TaskInstance& inst) {
    auto check = [&](bool cond, const std::string& what) {
        if (!cond) throw Error("instance integrity: " + what);
    };
    switch (task) {
        case Task::Ioi: {
            auto words = split_words(inst.prompt);
            const std::string& subj = inst.metadata.at("subject");
            const std::string& io = inst.metadata.at("indirect_object");
            check(std::count(words.begin(), words.end(), subj) == 2,
                  "subject must appear twice");
            check(std::count(words.begin(), words.end(), io) == 1,
                  "indirect object must appear once");
            check(inst.answer() == io, "answer must be the indirect object");
            break;
        }
        case Task::ArithPlus:
        case Task::ArithMinus: {
            bool plus = task == Task::ArithPlus;
            int x = std::stoi(inst.metadata.at("x"));
            int y = std::stoi(inst.metadata.at("y"));
            check(inst.answer() == std::to_string(arith::result_of(plus, x, y)),
                  "answer must equal the computed result");
            break;
        }
        case Task::Mcqa: {
            auto words = split_words(inst.prompt);
            const std::string& color = inst.metadata.at("color");
            size_t pos = std::stoul(inst.metadata.at("answer_position"));
            check(inst.answer_key == static_cast<int>(pos),
                  "answerKey must match the stored position");
            // the color right after the answer symbol token must be `color`
            std::string sym = inst.choices[pos] + ".";
            auto it = std::find(words.begin(), words.end(), sym);
            check(it != words.end() && it + 1 != words.end() &&
                      *(it + 1) == color,
                  "choice at answerKey must hold the stated color");
            break;
        }
    }
}

// ---------------------------------------------------------------------------
// vocabulary and word-level tokenizer
// ---------------------------------------------------------------------------

class Vocab {
public:
    static constexpr int kBos = 0;

    Vocab() { add("<bos>"); }

    int add(const std::string& word) {
        auto it = ids_.find(word);
        if (it != ids_.end()) return it->second;
        int id = static_cast<int>(words_.size());
        words_.push_back(word);
        ids_[word] = id;
        return id;
    }

    bool contains(const std::string& word) const { return ids_.count(word); }

    int id(const std::string& word) const {
        auto it = ids_.find(word);
        if (it == ids_.end()) throw Error("vocab: unknown word '" + word + "'");
        return it->second;
    }

    const std::string& word(int id) const {
        if (id < 0 || static_cast<size_t>(id) >= words_.size())
            throw Error("vocab: id out of range");
        return words_[static_cast<size_t>(id)];
    }

    size_t size() const { return words_.size(); }
    const std::vector<std::string>& words() const { return words_; }

    std::vector<int> tokenize(const std::string& text) const {
        std::vector<int> out;
        for (const auto& w : split_words(text)) out.push_back(id(w));
        return out;
    }

    std::string detokenize(const std::vector<int>& ids) const {
        std::vector<std::string> ws;
        for (int i : ids) ws.push_back(word(i));
        return join_words(ws);
    }

private:
    std::vector<std::string> words_;
    std::map<std::string, int> ids_;
};

// Registers every pool word (all splits, private included) with the
// decorated forms the templates can produce, so the vocabulary is closed.
inline Vocab build_task_vocab(Task task) {
    Vocab v;
    switch (task) {
        case Task::Ioi: {
            for (const auto& t : ioi::templates()) {
                v.add(t.opener);
                for (const auto& w : split_words(t.middle)) v.add(w);
                v.add(t.verb);
            }
            for (const char* w : {"and", "the", ",", "a", "to"}) v.add(w);
            for (const auto& n : pools::names()) v.add(n);
            for (const auto& p : pools::places()) v.add(p);
            for (const auto& o : pools::objects()) v.add(o);
            break;
        }
        case Task::ArithPlus:
        case Task::ArithMinus: {
            for (const char* w :
                 {"The", "sum", "of", "and", "is:", "difference", "between",
                  "Q:", "How", "much", "is", "plus", "minus", "?", "A:",
                  "What", "+", "-", "="})
                v.add(w);
            for (int i = 0; i <= 198; ++i) v.add(std::to_string(i));
            break;
        }
        case Task::Mcqa: {
            for (const char* w :
                 {"is", ".", "What", "color", "?", "Answer:"})
                v.add(w);
            for (const auto& noun : pools::nouns()) {
                for (const auto& w : split_words(noun)) v.add(w);
                auto first = split_words(noun)[0];
                v.add(capitalized(first));
            }
            for (const auto& c : pools::colors()) v.add(c);
            // bare symbols (answers) and decorated label forms
            for (char c = 'A'; c <= 'Z'; ++c) {
                v.add(std::string(1, c));
                v.add(std::string(1, c) + ".");
            }
            for (int i = 1; i <= 10; ++i) {
                v.add(std::to_string(i));
                v.add(std::to_string(i) + ".");
            }
            break;
        }
    }
    return v;
}

// ---------------------------------------------------------------------------
// line-delimited serialization
// ---------------------------------------------------------------------------

inline nlohmann::json instance_to_json(const TaskInstance& inst) {
    nlohmann::json j;
    j["prompt"] = inst.prompt;
    j["template"] = inst.template_id;
    j["metadata"] = inst.metadata;
    j["choices"] = inst.choices;
    j["answerKey"] = inst.answer_key;
    for (const auto& [name, v] : inst.counterfactuals) {
        j[name + "_counterfactual"] = {{"prompt", v.prompt},
                                       {"choices", v.choices},
                                       {"answerKey", v.answer_key}};
    }
    return j;
}

inline TaskInstance instance_from_json(const nlohmann::json& j, Task task) {
    TaskInstance inst;
    inst.prompt = j.at("prompt").get<std::string>();
    inst.template_id = j.at("template").get<int>();
    inst.metadata = j.at("metadata").get<std::map<std::string, std::string>>();
    inst.choices = j.at("choices").get<std::vector<std::string>>();
    inst.answer_key = j.at("answerKey").get<int>();
    const auto& legal = counterfactual_names(task);
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& key = it.key();
        if (key == "prompt" || key == "template" || key == "metadata" ||
            key == "choices" || key == "answerKey")
            continue;
        const std::string suffix = "_counterfactual";
        if (key.size() <= suffix.size() ||
            key.substr(key.size() - suffix.size()) != suffix)
            throw Error("dataset: unknown field '" + key + "'");
        std::string name = key.substr(0, key.size() - suffix.size());
        if (std::find(legal.begin(), legal.end(), name) == legal.end())
            throw Error("dataset: unknown counterfactual '" + name + "'");
        CfVariant v;
        v.prompt = it.value().at("prompt").get<std::string>();
        v.choices = it.value().at("choices").get<std::vector<std::string>>();
        v.answer_key = it.value().at("answerKey").get<int>();
        inst.counterfactuals[name] = std::move(v);
    }
    return inst;
}

inline void write_instances(const std::vector<TaskInstance>& instances,
                            const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    for (const auto& inst : instances) out << instance_to_json(inst) << "\n";
}

inline std::vector<TaskInstance> read_instances(const std::string& path,
                                                Task task) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path + "'");
    std::vector<TaskInstance> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(instance_from_json(nlohmann::json::parse(line), task));
        } catch (const std::exception& e) {
            throw Error("dataset line " + std::to_string(lineno) + ": " +
                        e.what());
        }
    }
    return out;
}

}  // namespace cbench
