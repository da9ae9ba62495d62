#include "filora/instructions.hpp"

// Built-in paraphrase banks. One template per line, slot markers in braces,
// slot word lists in the slots block. The conditions share the noun and
// verb slots but each keeps an exclusive family of marker words, which is
// what lets an order-insensitive encoder tell the conditions apart under
// mean pooling. The last fifth of each list is the held-out split.

namespace filora {

const char* kBuiltinSlots = R"(content: story plot meaning narrative message
voice: voice tone speech delivery
look: look style color appearance visuals
scene: background backdrop setting scenery
decide: decide judge classify pick rate
label: label class category
)";

const char* kBuiltinFocusCore = R"(rely on the {content} and ignore the {look}
trust the {content} and the {voice}
ground the {label} in the {content}
anchor the {label} to the {content} and the {voice}
weigh the {content} truly and skip the {look}
the substance of the {content} should {decide} the {label}
trust the {voice} and rely on the {content}
go by the essence of the {content}
the gist of the {content} matters so ignore the {scene}
rely on substance not the {look}
truly weigh the {content} and drop the {scene}
ground your {label} in the {voice} and the {content}
anchor on the {content} and overlook the {look}
trust substance over the {look}
rely on the depth of the {content}
weigh the {voice} and the {content} and ignore the {scene}
the {label} should rest on the {content}
read the {content} for its essence and {decide}
trust the {content} first and disregard the {look}
ground the {label} in what the {voice} and the {content} say
rely on the {content} and the {voice} and skip the {scene}
trust the gist of the {content}
anchor the {label} in substance and ignore the {look}
weigh the {content} and ground the {label} in it
truly rely on the {voice} and the {content}
)";

const char* kBuiltinIgnoreSpurious = R"(avoid the {look} when you {decide} the {label}
never let the {scene} matter
{decide} without the {look} and without the {scene}
exclude the {look} from the {label}
omit the {scene} entirely
discard the {look} before you {decide}
strip the {scene} away and then {decide}
set the {look} aside for this {label}
avoid the {scene} and the {look} completely
the {label} must stand without the {look}
never use the {scene} for the {label}
resist the {look} when making the {label}
omit the {look} and avoid the {scene}
exclude the {scene} from consideration
{decide} the {label} without the {look}
discard the {scene} and keep it out
avoid leaning on the {look}
never mind the {scene} when you {decide}
strip the {look} out of your {label}
set aside the {scene} and the {look}
avoid the {look} entirely for this {label}
exclude the {look} and omit the {scene}
never let the {look} sway the {label}
{decide} without any of the {scene}
discard the {look} and avoid the {scene}
)";

const char* kBuiltinNeutral = R"({decide} the {label} of this sample
what {label} fits this sample
give the {label} for this example
{decide} which {label} applies
assign a {label} to this item
provide the {label}
{decide} the {label} as usual
which {label} suits this example
make the {label} call
{decide} the {label} for the item
choose the {label}
name the {label} of this item
give this sample its {label}
report the {label}
{decide} on a {label}
state the {label} of the sample
assign the {label} normally
produce a {label} for this item
what is the right {label}
give your best {label}
choose a {label} for the item
name a {label} for this example
report which {label} applies
state which {label} fits
{decide} a {label} for this item
)";

const char* kBuiltinIgnoreCore = R"(use only the {look} and ignore the {content}
judge solely by the {scene}
purely the {look} should {decide} the {label}
just the {scene} and the {look} matter
go by the {look} alone
merely the surface counts so use the {look}
strictly the {scene} sets the {label}
only the outward {look} matters and skip the {content}
use just the {look} and drop the {voice}
solely the {look} and the {scene} count
rate the {label} only by the {look}
purely surface cues the {look} should lead
the {scene} alone should {decide}
only surface matters so ignore the {content}
use the {look} strictly and overlook the {voice}
just use the {look} and the {scene}
go purely on the {scene} and disregard the {content}
merely the {look} should inform the {label}
judge the {label} solely from the {scene} and the {look}
the {look} alone sets the {label}
use only the {scene} and the {look}
purely the {look} should count
{decide} just from the {look} alone
solely surface cues the {look} and the {scene}
go by the {scene} and the {look} merely
)";

const TemplateBank& TemplateBank::builtin() {
    static const TemplateBank bank = TemplateBank::parse(
        {
            {ConditionId::kFocusCore, kBuiltinFocusCore},
            {ConditionId::kIgnoreSpurious, kBuiltinIgnoreSpurious},
            {ConditionId::kNeutral, kBuiltinNeutral},
            {ConditionId::kIgnoreCore, kBuiltinIgnoreCore},
        },
        kBuiltinSlots);
    return bank;
}

}  // namespace filora
