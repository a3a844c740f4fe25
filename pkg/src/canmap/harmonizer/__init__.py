"""Conditional cycle-consistent mapper from K source sites to one reference domain."""
from .losses import adversarial_losses, cycle_loss, discriminator_loss, generator_adv_loss
from .networks import (DiscriminatorSpec, Generator, GeneratorSpec, HarmonizerModel, PatchDiscriminator,
                       SiteEmbedding, init_weights)
from .training import (DivergenceError, HarmonizerTrainConfig, IdentityHarmonizer, ImagePool,
                       cycle_reconstruction_error, embed_site, forward_harmonize, harmonize_dataset,
                       harmonize_volume, load_checkpoint, reverse_map, save_checkpoint, train_harmonizer,
                       write_history)
