#pragma once

#include <cstdint>
#include <vector>

#include "par/order.hpp"

namespace par {

enum class SlotKind : std::uint8_t { Label, Token, Transition };

// Token: index is the sequence position held. Transition: 1..n-1.
struct Slot {
  SlotKind kind = SlotKind::Label;
  int index = 0;

  bool operator==(const Slot&) const = default;
};

struct SlotRange {
  int begin = 0;
  int end = 0;

  int size() const { return end - begin; }
  bool contains(int s) const { return s >= begin && s < end; }
};

// Model-facing input sequence for one plan.
//
// With a sequential prefix the layout is
//   [L, v_0 .. v_{n-2}, v_{n-1}, M_1 .. M_{n-1}, v_n .. v_{K-1}]
// and attention groups are {L}, n-1 singletons, {v_{n-1}, M_1..M_{n-1}}, then
// blocks of n tokens. Slot p predicts v_p. Past the transition group a slot
// holding v_j predicts v_{j+n}; transition slot i predicts v_{n+i}.
struct SequenceLayout {
  OrderPlan plan;
  std::vector<Slot> slots;
  std::vector<int> target_of;  // -1 when the slot predicts nothing
  std::vector<SlotRange> groups;
  std::vector<int> group_of;
  int n = 1;

  int slot_count() const { return static_cast<int>(slots.size()); }
  int group_count() const { return static_cast<int>(groups.size()); }
  int targeted_count() const;
  // Sequence position held by a slot. Label and transition slots get virtual
  // positions: target - held is n for transition slots and every token slot
  // after the transition group, 1 for the label and the first n tokens.
  int held_position(int slot) const;
};

SequenceLayout build_sequence_layout(const OrderPlan& plan);

enum class MaskPattern : std::uint8_t {
  GroupBidirectional,  // full attention inside a group, causal across groups
  Causal,              // plain lower-triangular (within-group causal ablation)
};

class AttentionMask {
 public:
  AttentionMask() = default;
  explicit AttentionMask(int size) : size_(size), bits_(static_cast<size_t>(size) * size, 0) {}

  int size() const { return size_; }
  bool visible(int q, int k) const { return bits_[static_cast<size_t>(q) * size_ + k] != 0; }
  void set(int q, int k, bool v) { bits_[static_cast<size_t>(q) * size_ + k] = v ? 1 : 0; }
  const std::uint8_t* row(int q) const { return bits_.data() + static_cast<size_t>(q) * size_; }
  // Top-left p x p block, the mask seen by a prefix of the sequence.
  AttentionMask prefix(int p) const;

  bool operator==(const AttentionMask&) const = default;

 private:
  int size_ = 0;
  std::vector<std::uint8_t> bits_;
};

AttentionMask build_attention_mask(const SequenceLayout& layout,
                                   MaskPattern pattern = MaskPattern::GroupBidirectional);

AttentionMask causal_mask(int size);

struct MaskViolation {
  int query = 0;
  int key = 0;
  bool expected = false;
  bool actual = false;

  bool operator==(const MaskViolation&) const = default;
};

// Compares a mask against the group-bidirectional relation recomputed pair by
// pair from layout.groups. Throws std::invalid_argument on size mismatch.
std::vector<MaskViolation> verify_mask(const AttentionMask& mask, const SequenceLayout& layout);

}  // namespace par
