#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "filora/adapters.hpp"
#include "filora/bindings.hpp"
#include "filora/groups.hpp"
#include "filora/params.hpp"

namespace filora {

/// Hidden experimental condition. Reachable only from the training side;
/// the model forward interface never sees it.
enum class ConditionId { kFocusCore, kIgnoreSpurious, kNeutral, kIgnoreCore };

inline constexpr ConditionId kAllConditions[] = {ConditionId::kFocusCore, ConditionId::kIgnoreSpurious,
                                                 ConditionId::kNeutral, ConditionId::kIgnoreCore};

std::string condition_name(ConditionId id);
ConditionId condition_from_name(const std::string& name);

/// Condition with its gate-regularizer coefficients. alpha is the sign in
/// sum_g alpha_g * gate_g under minimization: -1 encourages a group's gate,
/// +1 discourages it, 0 leaves it free.
struct Condition {
    ConditionId id = ConditionId::kNeutral;
    std::map<GroupId, double> alpha;
    bool uses_proxy_target = false;
};

Condition make_condition(ConditionId id, const std::map<GroupId, GroupRole>& roles);

using ConditionTable = std::map<ConditionId, Condition>;
ConditionTable make_condition_table(const std::map<GroupId, GroupRole>& roles);

/// A rendered natural-language instruction. source_condition is bookkeeping
/// for dataset tooling and is never consumed by any model path.
struct Instruction {
    std::vector<std::string> tokens;
    ConditionId source_condition = ConditionId::kNeutral;

    std::string text() const;
};

/// Paraphrase bank: per condition, a list of templates with {slot} markers
/// filled from shared word lists. The last fifth of each list is reserved
/// as a held-out split for generalization tests and never appears in
/// training renders.
class TemplateBank {
  public:
    static const TemplateBank& builtin();
    static TemplateBank parse(const std::map<ConditionId, std::string>& bank_texts, const std::string& slots_text);
    static TemplateBank from_files(const std::string& dir);

    Instruction render(ConditionId id, std::uint64_t paraphrase_seed) const;
    Instruction render_heldout(ConditionId id, std::uint64_t paraphrase_seed) const;

    std::size_t template_count(ConditionId id) const;
    std::size_t heldout_count(ConditionId id) const;
    const std::vector<std::string>& template_lines(ConditionId id) const;

    /// All words any render can produce, sorted, without the UNK marker.
    const std::vector<std::string>& vocabulary_words() const { return vocab_words_; }

    void dump(const std::string& dir) const;

  private:
    Instruction render_from(ConditionId id, std::size_t tpl_index, std::uint64_t paraphrase_seed) const;

    std::map<ConditionId, std::vector<std::string>> templates_;
    std::map<std::string, std::vector<std::string>> slots_;
    std::vector<std::string> vocab_words_;
};

inline constexpr std::size_t kMaxInstructionTokens = 32;
inline const std::string kUnkToken = "<unk>";

/// Token-id mapping with a reserved UNK at id 0.
class Vocabulary {
  public:
    Vocabulary() = default;
    static Vocabulary from_words(std::vector<std::string> words);

    int id_of(const std::string& word) const;
    std::vector<int> encode(const Instruction& instruction) const;
    std::size_t size() const { return words_.size(); }
    const std::vector<std::string>& words() const { return words_; }

  private:
    std::vector<std::string> words_;
    std::map<std::string, int> index_;
};

struct EncoderDims {
    std::size_t embed = 32;
    std::size_t hidden = 64;
};

/// Token-embedding initialization scale. Mean pooling divides per-component
/// variance by the token count; instructions average about a dozen tokens,
/// so sqrt(12) keeps the pooled representation near unit variance.
inline constexpr double kEmbedInitStd = 3.4641016151377544;  // sqrt(12)

/// Instruction encoder h_phi: token embeddings, mean pooling, two GELU
/// feed-forward layers, and a linear projection whose sigmoid yields one
/// gate per group. The projection starts at zero so an untrained encoder
/// emits 0.5 for every gate.
struct InstructionEncoder {
    Vocabulary vocab;
    std::vector<GroupId> gate_order;
    Tensor embedding;  // [V x embed]
    Tensor w1, b1;     // [hidden x embed], [hidden]
    Tensor w2, b2;     // [hidden x hidden], [hidden]
    Tensor proj_w;     // [|G| x hidden]
    Tensor proj_b;     // [|G|]

    static InstructionEncoder init(Vocabulary vocab, std::vector<GroupId> gate_order, EncoderDims dims,
                                   std::uint64_t seed);

    NodeId encode_on_tape(TapeBindings& tb, const Instruction& instruction) const;
    NodeId gates_on_tape(TapeBindings& tb, const Instruction& instruction) const;

    Tensor encode(const Instruction& instruction) const;
    GateVector gates(const Instruction& instruction) const;
    GateVector gates_from_tensor(const Tensor& values) const;

    void append_params(std::vector<NamedParam>& out);
    std::size_t gate_index(const GroupId& id) const;
};

}  // namespace filora
