#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <set>

#include "cbench/tasks.hpp"

using namespace cbench;

TEST_CASE("ioi paper example: template fill and abc counterfactual") {
    // After Nick and John ... , Nick offered a nail to -> John
    auto inst = ioi::make_instance(0, "Nick", "John", /*subject_first=*/true,
                                   "store", "nail", "Max", "Fred", "Bob");
    REQUIRE(inst.prompt ==
            "After Nick and John spent some time at the store , Nick offered "
            "a nail to");
    REQUIRE(inst.answer() == "John");

    const auto& abc = inst.cf("abc");
    REQUIRE(abc.answer_key == -1);
    auto words = split_words(abc.prompt);
    REQUIRE(std::count(words.begin(), words.end(), "Bob") == 1);

    // IO <-> S1 flip swaps the first clause and keeps the answer
    const auto& s1 = inst.cf("io_s1_flip");
    REQUIRE(s1.choices[static_cast<size_t>(s1.answer_key)] == "John");
    REQUIRE(split_words(s1.prompt)[1] == "John");
    REQUIRE(split_words(s1.prompt)[3] == "Nick");

    // remaining table rows
    auto ans = [](const CfVariant& v) {
        return v.choices[static_cast<size_t>(v.answer_key)];
    };
    REQUIRE(ans(inst.cf("random_names")) == "Fred");
    REQUIRE(ans(inst.cf("io_s2_flip")) == "Nick");
    REQUIRE(ans(inst.cf("random_names_io_s1_flip")) == "Fred");
    REQUIRE(ans(inst.cf("random_names_io_s2_flip")) == "Max");
    REQUIRE(ans(inst.cf("io_s1_flip_io_s2_flip")) == "Nick");
    REQUIRE(ans(inst.cf("random_names_io_s1_flip_io_s2_flip")) == "Max");
}

TEST_CASE("ioi generation: determinism, well-formedness, counterfactual set") {
    auto a = gen_ioi(50, 7, Split::Train);
    auto b = gen_ioi(50, 7, Split::Train);
    REQUIRE(a.size() == 50);
    for (size_t i = 0; i < a.size(); ++i) REQUIRE(a[i] == b[i]);

    auto c = gen_ioi(50, 8, Split::Train);
    REQUIRE(!(a[0] == c[0]));

    const auto& names = counterfactual_names(Task::Ioi);
    for (const auto& inst : a) {
        verify_instance(Task::Ioi, inst);
        REQUIRE(inst.counterfactuals.size() == 8);
        for (const auto& n : names) REQUIRE(inst.counterfactuals.count(n));
        // name A != name B and base/cf prompts have equal token counts
        auto words = split_words(inst.prompt);
        REQUIRE(inst.choices[0] != inst.choices[1]);
        for (const auto& [k, v] : inst.counterfactuals)
            REQUIRE(split_words(v.prompt).size() == words.size());
    }
}

TEST_CASE("pool exhaustion raises") {
    Rng rng(1);
    std::vector<std::string> tiny{"A", "B"};
    REQUIRE_THROWS_AS(sample_distinct(tiny, 3, rng), Error);
}

TEST_CASE("arithmetic paper example 27+64") {
    Rng rng(5);
    auto inst = arith::make_instance(true, 27, 64, 0, rng);
    REQUIRE(inst.prompt == "The sum of 27 and 64 is:");
    REQUIRE(inst.answer() == "91");

    // carry flip really flips the ones carry
    const auto& oc = inst.cf("ones_carry");
    int cx = std::stoi(split_words(oc.prompt)[3]);
    int cy = std::stoi(split_words(oc.prompt)[5]);
    REQUIRE(arith::ones_carry(true, 27, 64) !=
            arith::ones_carry(true, cx, cy));
    REQUIRE(oc.choices[0] == std::to_string(cx + cy));
}

TEST_CASE("arithmetic generation invariants") {
    for (bool plus : {true, false}) {
        auto task = plus ? Task::ArithPlus : Task::ArithMinus;
        auto data = gen_arithmetic(plus, 60, 3, Split::Validation);
        auto again = gen_arithmetic(plus, 60, 3, Split::Validation);
        for (size_t i = 0; i < data.size(); ++i) REQUIRE(data[i] == again[i]);
        for (const auto& inst : data) {
            verify_instance(task, inst);
            REQUIRE(inst.counterfactuals.size() == 7);
            int x = std::stoi(inst.metadata.at("x"));
            int y = std::stoi(inst.metadata.at("y"));
            if (!plus) REQUIRE(x >= y);
            const auto& oc = inst.cf("ones_carry");
            auto w = split_words(oc.prompt);
            // operand positions depend on template; recover from numbers
            std::vector<int> nums;
            for (const auto& s : w)
                if (!s.empty() &&
                    s.find_first_not_of("0123456789") == std::string::npos)
                    nums.push_back(std::stoi(s));
            REQUIRE(nums.size() == 2);
            REQUIRE(arith::ones_carry(plus, nums[0], nums[1]) !=
                    arith::ones_carry(plus, x, y));
            REQUIRE(inst.cf("random_operands").choices[0] != inst.choices[0]);
        }
    }
}

TEST_CASE("subtraction carry flip can be unsatisfiable") {
    Rng rng(2);
    // 55-55: flipping the ones borrow requires ones(x)<ones(y) with x>=y and
    // equal tens, which is impossible
    REQUIRE_THROWS_WITH(arith::make_instance(false, 55, 55, 0, rng),
                        Catch::Matchers::ContainsSubstring("ones_carry"));
}

TEST_CASE("mcqa paper example: salmon meat is pink") {
    auto inst = mcqa::make_instance(
        "salmon meat", "pink", {"gray", "black", "white"}, /*answer_pos=*/3,
        /*swap_pos=*/2, "banana", "yellow", {"E", "Z", "F", "L"});
    REQUIRE(inst.prompt ==
            "Salmon meat is pink . What color is salmon meat ? A. gray B. "
            "black C. white D. pink Answer:");
    REQUIRE(inst.answer() == "D");

    REQUIRE(inst.cf("symbol").choices ==
            std::vector<std::string>{"1", "2", "3", "4"});
    REQUIRE(inst.cf("symbol").answer_key == 3);
    REQUIRE(inst.cf("symbol").choices[3] == "4");

    const auto& ap = inst.cf("answer_position");
    REQUIRE(ap.answer_key == 2);
    auto words = split_words(ap.prompt);
    auto it = std::find(words.begin(), words.end(), "C.");
    REQUIRE(*(it + 1) == "pink");

    REQUIRE(inst.cf("random_letter").choices ==
            std::vector<std::string>{"E", "Z", "F", "L"});
    REQUIRE(inst.cf("random_letter").answer_key == 3);

    const auto& color = inst.cf("color");
    REQUIRE(color.answer_key == 3);
    REQUIRE(split_words(color.prompt)[3] == "yellow");
}

TEST_CASE("mcqa generation invariants and choice counts") {
    for (size_t k : {2ul, 4ul, 6ul}) {
        auto data = gen_mcqa(30, k, 11, Split::Train);
        for (const auto& inst : data) {
            verify_instance(Task::Mcqa, inst);
            REQUIRE(inst.choices.size() == k);
            REQUIRE(inst.counterfactuals.size() == 9);
            for (const auto& [name, v] : inst.counterfactuals)
                if (name.find("position") != std::string::npos &&
                    name.find("color") == std::string::npos)
                    REQUIRE(v.answer_key != inst.answer_key);
        }
    }
    REQUIRE_THROWS_AS(gen_mcqa(5, 1, 0, Split::Train), Error);
    REQUIRE_THROWS_AS(gen_mcqa(5, 11, 0, Split::Train), Error);
}

TEST_CASE("split disjointness: private pools never leak into public") {
    auto collect_attrs = [](Task task, Split split) {
        std::set<std::string> attrs;
        auto data = generate(task, 40, 99, split);
        for (const auto& inst : data)
            for (const char* key :
                 {"subject", "indirect_object", "object", "place", "noun"})
                if (inst.metadata.count(key))
                    attrs.insert(inst.metadata.at(key));
        return attrs;
    };
    for (Task task : {Task::Ioi, Task::Mcqa}) {
        auto priv = collect_attrs(task, Split::TestPrivate);
        for (Split pub : {Split::Train, Split::Validation, Split::TestPublic}) {
            auto pubattrs = collect_attrs(task, pub);
            for (const auto& a : priv) REQUIRE(pubattrs.count(a) == 0);
        }
    }
}

TEST_CASE("vocabulary: single tokens, round-trip, private coverage") {
    for (Task task : {Task::Ioi, Task::ArithPlus, Task::Mcqa}) {
        Vocab v = build_task_vocab(task);
        REQUIRE(v.id("<bos>") == Vocab::kBos);
        for (Split split : {Split::Train, Split::TestPrivate}) {
            auto data = generate(task, 25, 4, split);
            for (const auto& inst : data) {
                auto toks = v.tokenize(inst.prompt);
                REQUIRE(v.detokenize(toks) == inst.prompt);
                for (const auto& c : inst.choices)
                    REQUIRE(v.tokenize(c).size() == 1);
                for (const auto& [name, cf] : inst.counterfactuals) {
                    REQUIRE(v.detokenize(v.tokenize(cf.prompt)) == cf.prompt);
                    for (const auto& c : cf.choices)
                        REQUIRE(v.tokenize(c).size() == 1);
                }
            }
        }
    }
    REQUIRE(build_task_vocab(Task::Ioi).tokenize("John").size() == 1);
    REQUIRE_THROWS_AS(build_task_vocab(Task::Ioi).tokenize("zzz"), Error);
}

TEST_CASE("dataset io round-trip") {
    std::string path = "test_tasks_io.jsonl";

    // empty list -> empty file -> empty list
    write_instances({}, path);
    REQUIRE(read_instances(path, Task::Ioi).empty());

    auto data = gen_ioi(200, 13, Split::Train);
    write_instances(data, path);
    auto back = read_instances(path, Task::Ioi);
    REQUIRE(back.size() == data.size());
    for (size_t i = 0; i < data.size(); ++i) REQUIRE(data[i] == back[i]);

    // unknown counterfactual key is rejected with a line number
    {
        auto j = instance_to_json(data[0]);
        j["bogus_counterfactual"] = {{"prompt", "x"},
                                     {"choices", {"a"}},
                                     {"answerKey", 0}};
        std::ofstream out(path);
        out << j << "\n";
    }
    REQUIRE_THROWS_WITH(read_instances(path, Task::Ioi),
                        Catch::Matchers::ContainsSubstring("line 1"));
    std::remove(path.c_str());
}
