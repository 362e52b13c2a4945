// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "m3c2/backbone.hpp"
#include "m3c2/config.hpp"
#include "m3c2/databank.hpp"
#include "m3c2/disentangler.hpp"
#include "m3c2/gradcore.hpp"
#include "m3c2/heads.hpp"
#include "m3c2/interaction.hpp"
#include "m3c2/metrics.hpp"
#include "m3c2/model.hpp"
#include "m3c2/nn.hpp"
#include "m3c2/optim.hpp"
#include "m3c2/trainer.hpp"
